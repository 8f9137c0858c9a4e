//! Depth error metrics, threshold accuracies and topological accuracies.

use std::fmt::Write as _;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::worldgen::DepthMap;

/// Estimates below this are clamped before ratios and logs.
pub const ESTIMATE_FLOOR: f64 = 1e-6;
const DELTA_BASE: f64 = 1.25;

/// Running sums over valid pixels; combine frames in a fixed order for
/// bit-stable totals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DepthAccumulator {
    pixels: usize,
    clamped: usize,
    sum_gt: f64,
    sum_sq: f64,
    sum_sq_log: f64,
    sum_abs_rel: f64,
    sum_sq_rel: f64,
    delta: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub mean_gt_depth: f64,
    pub rmse: f64,
    pub log_rmse: f64,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub pixel_count: usize,
    pub clamped_estimates: usize,
}

impl DepthAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds every pixel whose ground truth is present and positive and whose
    /// `mask` entry (if any) is set.
    pub fn add(&mut self, estimated: &DepthMap, ground_truth: &DepthMap, mask: Option<&[bool]>) -> Result<()> {
        if estimated.width != ground_truth.width || estimated.height != ground_truth.height {
            return Err(Error::shape(
                format!("{}x{}", ground_truth.width, ground_truth.height),
                format!("{}x{}", estimated.width, estimated.height),
            ));
        }
        if let Some(m) = mask {
            if m.len() != ground_truth.depths.len() {
                return Err(Error::shape(ground_truth.depths.len(), m.len()));
            }
        }
        for (i, (&e, &g)) in estimated.depths.iter().zip(&ground_truth.depths).enumerate() {
            if g.is_nan() || g <= 0.0 || mask.is_some_and(|m| !m[i]) {
                continue;
            }
            let e = if e.is_nan() || e < ESTIMATE_FLOOR {
                self.clamped += 1;
                ESTIMATE_FLOOR
            } else {
                e
            };
            let diff = e - g;
            self.pixels += 1;
            self.sum_gt += g;
            self.sum_sq += diff * diff;
            self.sum_sq_log += (e.ln() - g.ln()).powi(2);
            self.sum_abs_rel += diff.abs() / g;
            self.sum_sq_rel += diff * diff / g;
            let ratio = (g / e).max(e / g);
            let mut threshold = 1.0;
            for k in 0..3 {
                threshold *= DELTA_BASE;
                if ratio < threshold {
                    self.delta[k] += 1;
                }
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<DepthMetrics> {
        if self.pixels == 0 {
            return Err(Error::NoValidPixels);
        }
        if self.clamped > 0 {
            debug!("clamped {} non-positive depth estimates to {ESTIMATE_FLOOR}", self.clamped);
        }
        let n = self.pixels as f64;
        Ok(DepthMetrics {
            mean_gt_depth: self.sum_gt / n,
            rmse: (self.sum_sq / n).sqrt(),
            log_rmse: (self.sum_sq_log / n).sqrt(),
            abs_rel: self.sum_abs_rel / n,
            sq_rel: self.sum_sq_rel / n,
            delta1: self.delta[0] as f64 / n,
            delta2: self.delta[1] as f64 / n,
            delta3: self.delta[2] as f64 / n,
            pixel_count: self.pixels,
            clamped_estimates: self.clamped,
        })
    }
}

/// Metrics over the valid pixels of one estimate/ground-truth pair.
pub fn depth_metrics(estimated: &DepthMap, ground_truth: &DepthMap, mask: Option<&[bool]>) -> Result<DepthMetrics> {
    let mut acc = DepthAccumulator::new();
    acc.add(estimated, ground_truth, mask)?;
    acc.finish()
}

/// Exact and off-by-one node accuracy. On a loop, nodes 0 and N-1 are adjacent.
pub fn topo_metrics(predictions: &[usize], truths: &[usize], num_nodes: usize, is_loop: bool) -> Result<(f64, f64)> {
    if predictions.len() != truths.len() {
        return Err(Error::LengthMismatch(predictions.len(), truths.len()));
    }
    if predictions.is_empty() {
        return Err(Error::Empty("prediction list"));
    }
    if let Some(&bad) = predictions.iter().chain(truths).find(|&&id| id >= num_nodes) {
        return Err(Error::IndexOutOfRange { index: bad, len: num_nodes });
    }
    let mut exact = 0;
    let mut near = 0;
    for (&p, &t) in predictions.iter().zip(truths) {
        let d = p.abs_diff(t);
        let d = if is_loop { d.min(num_nodes - d) } else { d };
        exact += (d == 0) as usize;
        near += (d <= 1) as usize;
    }
    let n = predictions.len() as f64;
    Ok((exact as f64 / n, near as f64 / n))
}

/// Depth and localization quality over one dataset split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mean_gt_depth: f64,
    pub rmse: f64,
    pub log_rmse: f64,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub topo_accuracy: f64,
    pub topo_off_by_one: f64,
    pub pixel_count: usize,
    pub frame_count: usize,
    /// Depth metrics when conditioning on the ground-truth node instead of the prediction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_node: Option<DepthMetrics>,
}

impl MetricsReport {
    pub fn new(depth: DepthMetrics, topo: (f64, f64), frame_count: usize, oracle_node: Option<DepthMetrics>) -> Self {
        MetricsReport {
            mean_gt_depth: depth.mean_gt_depth,
            rmse: depth.rmse,
            log_rmse: depth.log_rmse,
            abs_rel: depth.abs_rel,
            sq_rel: depth.sq_rel,
            delta1: depth.delta1,
            delta2: depth.delta2,
            delta3: depth.delta3,
            topo_accuracy: topo.0,
            topo_off_by_one: topo.1,
            pixel_count: depth.pixel_count,
            frame_count,
            oracle_node,
        }
    }

    /// `key=value` lines, one metric per line.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        let rows: [(&str, f64); 10] = [
            ("mean_gt_depth", self.mean_gt_depth),
            ("rmse", self.rmse),
            ("log_rmse", self.log_rmse),
            ("abs_rel", self.abs_rel),
            ("sq_rel", self.sq_rel),
            ("delta1", self.delta1),
            ("delta2", self.delta2),
            ("delta3", self.delta3),
            ("topo_accuracy", self.topo_accuracy),
            ("topo_off_by_one", self.topo_off_by_one),
        ];
        for (k, v) in rows {
            let _ = writeln!(out, "{k}={v}");
        }
        let _ = writeln!(out, "pixel_count={}", self.pixel_count);
        let _ = writeln!(out, "frame_count={}", self.frame_count);
        if let Some(o) = &self.oracle_node {
            let _ = writeln!(out, "oracle_node.rmse={}", o.rmse);
            let _ = writeln!(out, "oracle_node.abs_rel={}", o.abs_rel);
            let _ = writeln!(out, "oracle_node.delta1={}", o.delta1);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn table_header() -> &'static str {
        "| Dataset | Mean depth | RMSE | log RMSE | Abs Rel | Sq Rel | d<1.25 | d<1.25^2 | d<1.25^3 | Topo acc | Off-by-one |"
    }

    /// One row shaped like a depth-benchmark table.
    pub fn table_row(&self, name: &str) -> String {
        format!(
            "| {name} | {:.2} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} | {:.2}% | {:.2}% |",
            self.mean_gt_depth,
            self.rmse,
            self.log_rmse,
            self.abs_rel,
            self.sq_rel,
            self.delta1,
            self.delta2,
            self.delta3,
            100.0 * self.topo_accuracy,
            100.0 * self.topo_off_by_one
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(values: &[f64]) -> DepthMap {
        DepthMap::new(values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn identical_maps_are_perfect() {
        let g = map(&[1.0, 2.5, 4.0]);
        let m = depth_metrics(&g, &g, None).unwrap();
        assert_eq!((m.rmse, m.log_rmse, m.abs_rel, m.sq_rel), (0.0, 0.0, 0.0, 0.0));
        assert_eq!((m.delta1, m.delta2, m.delta3), (1.0, 1.0, 1.0));
    }

    #[test]
    fn one_pixel_half_depth() {
        let m = depth_metrics(&map(&[1.0]), &map(&[2.0]), None).unwrap();
        assert_eq!((m.abs_rel, m.sq_rel, m.rmse), (0.5, 0.5, 1.0));
        assert!((m.log_rmse - 2f64.ln()).abs() < 1e-12);
        // ratio 2 exceeds 1.25^3 = 1.953125
        assert_eq!((m.delta1, m.delta2, m.delta3), (0.0, 0.0, 0.0));
    }

    #[test]
    fn two_pixel_case() {
        let m = depth_metrics(&map(&[2.0, 3.0]), &map(&[1.0, 3.0]), None).unwrap();
        assert!((m.rmse - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(m.delta1, 0.5);
    }

    #[test]
    fn holes_and_mask_are_excluded() {
        let g = map(&[f64::NAN, 2.0, 0.0, 4.0]);
        let e = map(&[9.0, 2.0, 5.0, 1.0]);
        let m = depth_metrics(&e, &g, Some(&[true, true, true, false])).unwrap();
        assert_eq!(m.pixel_count, 1);
        assert_eq!(m.rmse, 0.0);
        assert!(matches!(depth_metrics(&e, &map(&[f64::NAN; 4]), None), Err(Error::NoValidPixels)));
    }

    #[test]
    fn non_positive_estimates_are_floored() {
        let m = depth_metrics(&map(&[0.0, -1.0]), &map(&[1.0, 1.0]), None).unwrap();
        assert_eq!(m.clamped_estimates, 2);
        assert!(m.log_rmse.is_finite());
    }

    #[test]
    fn topo_identity() {
        assert_eq!(topo_metrics(&[0, 3, 2], &[0, 3, 2], 4, true).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn topo_off_by_one_on_loop() {
        let (acc, near) = topo_metrics(&[0, 1, 2], &[1, 1, 1], 4, true).unwrap();
        assert!((acc - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(near, 1.0);
        assert_eq!(topo_metrics(&[2], &[0], 4, true).unwrap(), (0.0, 0.0));
        // seam adjacency only on loops
        assert_eq!(topo_metrics(&[3], &[0], 4, true).unwrap(), (0.0, 1.0));
        assert_eq!(topo_metrics(&[3], &[0], 4, false).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn topo_errors() {
        assert!(matches!(topo_metrics(&[0, 1], &[0], 4, true), Err(Error::LengthMismatch(2, 1))));
        assert!(topo_metrics(&[], &[], 4, true).is_err());
        assert!(topo_metrics(&[4], &[0], 4, true).is_err());
    }

    #[test]
    fn report_text_forms() {
        let g = map(&[1.0, 2.0]);
        let report = MetricsReport::new(depth_metrics(&g, &g, None).unwrap(), (1.0, 1.0), 1, None);
        assert!(report.to_key_value().contains("delta1=1\n"));
        assert!(report.table_row("x").starts_with("| x | 1.50 |"));
        let json = serde_json::to_string(&report).unwrap();
        assert_eq!(serde_json::from_str::<MetricsReport>(&json).unwrap(), report);
    }

    fn pairs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        proptest::collection::vec((0.1f64..10.0, 0.1f64..10.0), 1..40).prop_map(|v| v.into_iter().unzip())
    }

    proptest! {
        #[test]
        fn deltas_are_monotone((e, g) in pairs()) {
            let m = depth_metrics(&map(&e), &map(&g), None).unwrap();
            prop_assert!(m.delta1 <= m.delta2 && m.delta2 <= m.delta3);
        }

        #[test]
        fn scale_equivariance((e, g) in pairs(), s in 0.1f64..10.0) {
            let a = depth_metrics(&map(&e), &map(&g), None).unwrap();
            let es: Vec<f64> = e.iter().map(|v| v * s).collect();
            let gs: Vec<f64> = g.iter().map(|v| v * s).collect();
            let b = depth_metrics(&map(&es), &map(&gs), None).unwrap();
            prop_assert!((a.log_rmse - b.log_rmse).abs() < 1e-12);
            prop_assert!((a.abs_rel - b.abs_rel).abs() < 1e-12);
            prop_assert!((a.rmse * s - b.rmse).abs() < 1e-12 * (1.0 + b.rmse));
            prop_assert!((a.sq_rel * s - b.sq_rel).abs() < 1e-12 * (1.0 + b.sq_rel));
            prop_assert_eq!((a.delta1, a.delta2, a.delta3), (b.delta1, b.delta2, b.delta3));
        }

        #[test]
        fn pixel_order_invariance((e, g) in pairs(), rot in 0usize..40) {
            let r = rot % e.len();
            let mut e2 = e.clone();
            let mut g2 = g.clone();
            e2.rotate_left(r);
            g2.rotate_left(r);
            let a = depth_metrics(&map(&e), &map(&g), None).unwrap();
            let b = depth_metrics(&map(&e2), &map(&g2), None).unwrap();
            prop_assert!((a.rmse - b.rmse).abs() < 1e-12);
            prop_assert!((a.abs_rel - b.abs_rel).abs() < 1e-12);
            prop_assert_eq!(a.delta1, b.delta1);
        }
    }
}
