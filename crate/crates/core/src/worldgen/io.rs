//! Raster files: binary PPM for RGB, `DEPTHF32` for depth.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{DepthMap, RgbImage};
use crate::error::{Error, Result};

pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.pixels.iter().map(|v| (255.0 * v).round().clamp(0.0, 255.0) as u8));
    out
}

/// Splits `count` whitespace-separated header tokens off the front of `bytes`,
/// returning them and the remainder after the single separating whitespace byte.
fn header_tokens(bytes: &[u8], count: usize) -> Option<(Vec<String>, &[u8])> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() {
        return if count > 0 { Some((tokens, &bytes[bytes.len()..])) } else { None };
    }
    Some((tokens, &bytes[i + 1..]))
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let (tokens, body) = header_tokens(bytes, 4).ok_or_else(|| Error::format(path, "truncated PPM header"))?;
    if tokens[0] != "P6" {
        return Err(Error::format(path, format!("expected P6 magic, found {:?}", tokens[0])));
    }
    let parse = |t: &str| t.parse::<usize>().map_err(|_| Error::format(path, format!("bad PPM field {t:?}")));
    let (width, height, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval != 255 {
        return Err(Error::format(path, format!("only 8-bit PPM supported, maxval {maxval}")));
    }
    let n = width * height * 3;
    if body.len() != n {
        return Err(Error::format(path, format!("expected {n} pixel bytes, found {}", body.len())));
    }
    RgbImage::new(width, height, body.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn encode_depth(depth: &DepthMap) -> Vec<u8> {
    let mut out = format!("DEPTHF32 {} {}\n", depth.width, depth.height).into_bytes();
    for d in &depth.depths {
        out.extend_from_slice(&(*d as f32).to_le_bytes());
    }
    out
}

pub fn decode_depth(bytes: &[u8], path: &Path) -> Result<DepthMap> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing DEPTHF32 header"))?;
    let header = std::str::from_utf8(&bytes[..newline]).map_err(|_| Error::format(path, "non-ASCII header"))?;
    let fields: Vec<&str> = header.split(' ').collect();
    if fields.len() != 3 || fields[0] != "DEPTHF32" {
        return Err(Error::format(path, format!("bad depth header {header:?}")));
    }
    let parse = |t: &str| t.parse::<usize>().map_err(|_| Error::format(path, format!("bad dimension {t:?}")));
    let (width, height) = (parse(fields[1])?, parse(fields[2])?);
    let body = &bytes[newline + 1..];
    if body.len() != width * height * 4 {
        return Err(Error::format(path, format!("expected {} payload bytes, found {}", width * height * 4, body.len())));
    }
    let depths = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    DepthMap::new(width, height, depths)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, image: &RgbImage) -> Result<()> {
    write_bytes(path, &encode_ppm(image))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?, path)
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    write_bytes(path, &encode_depth(depth))
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    decode_depth(&fs::read(path).map_err(|e| Error::io(path, e))?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ppm_layout() {
        let img = RgbImage::new(8, 8, vec![1.0; 192]).unwrap();
        let bytes = encode_ppm(&img);
        assert!(bytes.starts_with(b"P6\n8 8\n255\n"));
        assert_eq!(bytes.len(), 11 + 192);
        assert!(bytes[11..].iter().all(|&b| b == 255));
    }

    #[test]
    fn depth_layout_and_holes() {
        let mut depths = vec![1.5; 64];
        depths[3] = f64::NAN;
        let map = DepthMap::new(8, 8, depths).unwrap();
        let bytes = encode_depth(&map);
        assert!(bytes.starts_with(b"DEPTHF32 8 8\n"));
        assert_eq!(&bytes[13..17], &1.5f32.to_le_bytes());
        let back = decode_depth(&bytes, Path::new("x")).unwrap();
        assert!(back.depths[3].is_nan());
        assert_eq!(back.depths[0], 1.5);
    }

    #[test]
    fn truncated_files_rejected() {
        let map = DepthMap::new(8, 8, vec![1.0; 64]).unwrap();
        let bytes = encode_depth(&map);
        assert!(decode_depth(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        let img = RgbImage::new(8, 8, vec![0.5; 192]).unwrap();
        let bytes = encode_ppm(&img);
        assert!(decode_ppm(&bytes[..bytes.len() - 3], Path::new("x")).is_err());
    }

    proptest! {
        #[test]
        fn ppm_round_trip_within_quantization(values in proptest::collection::vec(0.0f64..=1.0, 192)) {
            let img = RgbImage::new(8, 8, values).unwrap();
            let back = decode_ppm(&encode_ppm(&img), Path::new("x")).unwrap();
            for (a, b) in img.pixels.iter().zip(&back.pixels) {
                prop_assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }

        #[test]
        fn depth_round_trip_is_f32_exact(values in proptest::collection::vec(0.01f32..20.0, 64)) {
            let map = DepthMap::new(8, 8, values.iter().map(|v| *v as f64).collect()).unwrap();
            let back = decode_depth(&encode_depth(&map), Path::new("x")).unwrap();
            prop_assert_eq!(back, map);
        }
    }
}
