//! Hole filling and normalization of rasters into model range.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::worldgen::{DepthMap, RgbImage};

pub const DEFAULT_FILL_TOL: f64 = 1e-6;
pub const DEFAULT_FILL_MAX_ITERS: usize = 10_000;

/// Fills holes with the discrete harmonic interpolant of the valid pixels.
///
/// Jacobi sweeps replace every hole pixel by the mean of its in-bounds
/// 4-neighbors until the largest update drops below `tol`. Valid pixels are
/// never written. Every hole starts from the global mean of the valid pixels.
pub fn fill_holes(depth: &DepthMap, tol: f64, max_iters: usize) -> Result<DepthMap> {
    let (w, h) = (depth.width, depth.height);
    let valid_count = depth.depths.iter().filter(|d| !d.is_nan()).count();
    if valid_count == 0 {
        return Err(Error::AllHoles);
    }
    let holes: Vec<usize> = (0..w * h).filter(|&i| depth.depths[i].is_nan()).collect();
    if holes.is_empty() {
        return Ok(depth.clone());
    }
    let mean = depth.depths.iter().filter(|d| !d.is_nan()).sum::<f64>() / valid_count as f64;

    let mut current = depth.depths.clone();
    for &i in &holes {
        current[i] = mean;
    }

    let neighbors = |i: usize| {
        let (r, c) = (i / w, i % w);
        let mut out = [usize::MAX; 4];
        if r > 0 {
            out[0] = i - w;
        }
        if r + 1 < h {
            out[1] = i + w;
        }
        if c > 0 {
            out[2] = i - 1;
        }
        if c + 1 < w {
            out[3] = i + 1;
        }
        out
    };

    let mut next = current.clone();
    let mut iters = 0;
    while iters < max_iters {
        iters += 1;
        let mut max_change: f64 = 0.0;
        for &i in &holes {
            let (sum, n) = neighbors(i)
                .iter()
                .filter(|&&j| j != usize::MAX)
                .fold((0.0, 0usize), |(s, n), &j| (s + current[j], n + 1));
            let v = sum / n as f64;
            max_change = max_change.max((v - current[i]).abs());
            next[i] = v;
        }
        std::mem::swap(&mut current, &mut next);
        if max_change < tol {
            break;
        }
    }
    debug!("filled {} holes in {iters} Jacobi sweeps", holes.len());
    DepthMap::new(w, h, current)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub max_depth: f64,
}

impl NormalizationSpec {
    pub fn new(max_depth: f64) -> Result<Self> {
        if !(max_depth > 0.0 && max_depth.is_finite()) {
            return Err(Error::Config(format!("max_depth must be > 0, got {max_depth}")));
        }
        Ok(NormalizationSpec { max_depth })
    }
}

/// Depth scaled into [0, 1], plus how many values had to be clamped.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedDepth {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub clamped: usize,
}

pub fn normalize_depth(depth: &DepthMap, spec: &NormalizationSpec) -> Result<NormalizedDepth> {
    let holes = depth.hole_count();
    if holes > 0 {
        return Err(Error::HolePresent(holes));
    }
    let mut clamped = 0;
    let values = depth
        .depths
        .iter()
        .map(|d| {
            let v = d / spec.max_depth;
            if v > 1.0 {
                clamped += 1;
                1.0
            } else {
                v.max(0.0)
            }
        })
        .collect();
    if clamped > 0 {
        debug!("clamped {clamped} depths above {} m", spec.max_depth);
    }
    Ok(NormalizedDepth { width: depth.width, height: depth.height, values, clamped })
}

pub fn denormalize_depth(width: usize, height: usize, values: &[f64], spec: &NormalizationSpec) -> Result<DepthMap> {
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::OutOfRange { value: *v, lo: 0.0, hi: 1.0 });
    }
    DepthMap::new(width, height, values.iter().map(|v| v * spec.max_depth).collect())
}

/// Planar (channel-major) copy of an interleaved RGB image.
pub fn rgb_planes(image: &RgbImage) -> Vec<f64> {
    let n = image.width * image.height;
    let mut out = vec![0.0; 3 * n];
    for (i, px) in image.pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * n + i] = px[c];
        }
    }
    out
}

/// Interleaved image from channel-major planes, clamped into [0, 1].
pub fn rgb_from_planes(width: usize, height: usize, planes: &[f64]) -> Result<RgbImage> {
    let n = width * height;
    if planes.len() != 3 * n {
        return Err(Error::shape(3 * n, planes.len()));
    }
    let mut pixels = Vec::with_capacity(3 * n);
    for i in 0..n {
        for c in 0..3 {
            pixels.push(planes[c * n + i].clamp(0.0, 1.0));
        }
    }
    RgbImage::new(width, height, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldgen::punch_holes;
    use proptest::prelude::*;

    #[test]
    fn constant_map_fills_constant() {
        let map = DepthMap::new(16, 16, vec![2.0; 256]).unwrap();
        let holed = punch_holes(&map, 0.3, 3).unwrap();
        assert!(holed.hole_count() > 0);
        let filled = fill_holes(&holed, DEFAULT_FILL_TOL, DEFAULT_FILL_MAX_ITERS).unwrap();
        assert!(filled.depths.iter().all(|d| (d - 2.0).abs() < 1e-6));
    }

    #[test]
    fn strip_hole_is_midpoint() {
        let map = DepthMap::new(3, 1, vec![1.0, f64::NAN, 3.0]).unwrap();
        let filled = fill_holes(&map, 1e-12, 100).unwrap();
        assert_eq!(filled.depths, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn strip_with_two_holes_is_linear() {
        // fixed point of x1 = (1 + x2)/2, x2 = (x1 + 4)/2 is (2, 3)
        let map = DepthMap::new(4, 1, vec![1.0, f64::NAN, f64::NAN, 4.0]).unwrap();
        let filled = fill_holes(&map, 1e-13, 10_000).unwrap();
        assert!((filled.depths[1] - 2.0).abs() < 1e-12);
        assert!((filled.depths[2] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn dense_map_unchanged() {
        let map = DepthMap::new(8, 8, (0..64).map(|i| 1.0 + i as f64 * 0.01).collect()).unwrap();
        assert_eq!(fill_holes(&map, DEFAULT_FILL_TOL, 10).unwrap(), map);
    }

    #[test]
    fn all_holes_rejected() {
        let map = DepthMap::new(8, 8, vec![f64::NAN; 64]).unwrap();
        assert!(matches!(fill_holes(&map, 1e-6, 10), Err(Error::AllHoles)));
    }

    #[test]
    fn normalize_cases() {
        let spec = NormalizationSpec::new(4.0).unwrap();
        let map = DepthMap::new(3, 1, vec![4.0, 2.0, 4.8]).unwrap();
        let n = normalize_depth(&map, &spec).unwrap();
        assert_eq!(n.values, vec![1.0, 0.5, 1.0]);
        assert_eq!(n.clamped, 1);
        let holed = DepthMap::new(2, 1, vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(normalize_depth(&holed, &spec), Err(Error::HolePresent(1))));
    }

    #[test]
    fn denormalize_cases() {
        let spec = NormalizationSpec::new(4.0).unwrap();
        assert_eq!(denormalize_depth(1, 1, &[0.0], &spec).unwrap().depths, vec![0.0]);
        assert!(matches!(denormalize_depth(1, 1, &[1.5], &spec), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn rgb_plane_round_trip() {
        let img = RgbImage::new(8, 8, (0..192).map(|i| i as f64 / 191.0).collect()).unwrap();
        let planes = rgb_planes(&img);
        assert_eq!(planes[64], img.pixels[1]);
        assert_eq!(rgb_from_planes(8, 8, &planes).unwrap(), img);
    }

    fn arb_holed_map() -> impl Strategy<Value = DepthMap> {
        (proptest::collection::vec(0.5f64..9.0, 144), proptest::collection::vec(any::<bool>(), 144)).prop_map(
            |(values, mask)| {
                let mut depths: Vec<f64> = values.iter().zip(&mask).map(|(v, m)| if *m { f64::NAN } else { *v }).collect();
                if depths.iter().all(|d| d.is_nan()) {
                    depths[0] = 1.0;
                }
                DepthMap::new(12, 12, depths).unwrap()
            },
        )
    }

    proptest! {
        #[test]
        fn filled_values_obey_maximum_principle(map in arb_holed_map()) {
            let valid: Vec<f64> = map.depths.iter().copied().filter(|d| !d.is_nan()).collect();
            let lo = valid.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = valid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let filled = fill_holes(&map, 1e-8, 2_000).unwrap();
            prop_assert_eq!(filled.hole_count(), 0);
            for (orig, out) in map.depths.iter().zip(&filled.depths) {
                if orig.is_nan() {
                    prop_assert!(*out >= lo && *out <= hi);
                } else {
                    prop_assert_eq!(orig.to_bits(), out.to_bits());
                }
            }
        }

        #[test]
        fn fill_is_idempotent(map in arb_holed_map()) {
            let once = fill_holes(&map, 1e-8, 2_000).unwrap();
            let twice = fill_holes(&once, 1e-8, 2_000).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn normalize_round_trip(values in proptest::collection::vec(0.0f64..7.0, 64)) {
            let spec = NormalizationSpec::new(7.0).unwrap();
            let map = DepthMap::new(8, 8, values).unwrap();
            let n = normalize_depth(&map, &spec).unwrap();
            let back = denormalize_depth(8, 8, &n.values, &spec).unwrap();
            for (a, b) in map.depths.iter().zip(&back.depths) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
