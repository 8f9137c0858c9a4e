//! Versioned binary container for named f64 arrays.
//!
//! Layout: 8-byte magic, u32 format version, u32 header length, JSON header
//! (section tag, config, array directory), little-endian f64 payload, and a
//! trailing SHA-256 over everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{AdamState, ParamEntry, ParamStore};

const MAGIC: &[u8; 8] = b"TDCKPT\0\0";
pub const FORMAT_VERSION: u32 = 2;
const DIGEST_LEN: usize = 32;

pub const SECTION_CVAE: &str = "cvae";
pub const SECTION_CLASSIFIER: &str = "classifier";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub section: String,
    /// Architecture and training configuration needed to rebuild the model.
    pub config: serde_json::Value,
    pub step: u64,
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
}

#[derive(Serialize, Deserialize)]
struct ArrayInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    section: String,
    config: serde_json::Value,
    step: u64,
    arrays: Vec<ArrayInfo>,
    optimizer_t: Option<u64>,
}

pub fn encode(checkpoint: &Checkpoint) -> Vec<u8> {
    let header = Header {
        section: checkpoint.section.clone(),
        config: checkpoint.config.clone(),
        step: checkpoint.step,
        arrays: checkpoint
            .params
            .entries()
            .iter()
            .map(|e| ArrayInfo { name: e.name.clone(), shape: e.shape.clone() })
            .collect(),
        optimizer_t: checkpoint.optimizer.as_ref().map(|o| o.t),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let mut put = |values: &[f64]| {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    for e in checkpoint.params.entries() {
        put(&e.data);
    }
    if let Some(opt) = &checkpoint.optimizer {
        for m in &opt.m {
            put(m);
        }
        for v in &opt.v {
            put(v);
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        // too short to carry a version: treat as corruption
        if bytes.len() >= 8 && &bytes[..8] != MAGIC {
            return Err(Error::format(path, "not a checkpoint file"));
        }
        return Err(Error::ChecksumMismatch { path: path.into() });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { path: path.into(), found: version, expected: FORMAT_VERSION });
    }
    if bytes.len() < 16 + DIGEST_LEN {
        return Err(Error::ChecksumMismatch { path: path.into() });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::ChecksumMismatch { path: path.into() });
    }
    let header_len = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
    let header: Header = body
        .get(16..16 + header_len)
        .and_then(|h| serde_json::from_slice(h).ok())
        .ok_or_else(|| Error::format(path, "unreadable header"))?;
    let mut payload = body[16 + header_len..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = |n: usize| -> Result<Vec<f64>> {
        let v: Vec<f64> = payload.by_ref().take(n).collect();
        if v.len() == n {
            Ok(v)
        } else {
            Err(Error::format(path, "payload shorter than array directory"))
        }
    };
    let mut entries = Vec::with_capacity(header.arrays.len());
    for info in &header.arrays {
        let data = take(info.shape.iter().product())?;
        entries.push(ParamEntry { name: info.name.clone(), shape: info.shape.clone(), data });
    }
    let optimizer = match header.optimizer_t {
        Some(t) => {
            let sizes: Vec<usize> = entries.iter().map(|e| e.data.len()).collect();
            let m = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
            let v = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
            Some(AdamState { t, m, v })
        }
        None => None,
    };
    Ok(Checkpoint {
        section: header.section,
        config: header.config,
        step: header.step,
        params: ParamStore::from_entries(entries),
        optimizer,
    })
}

/// Writes via a temporary sibling and rename so readers never see a partial file.
pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(checkpoint)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Loads and checks the section tag.
pub fn load_section(path: &Path, section: &str) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if ck.section != section {
        return Err(Error::format(path, format!("expected a {section} checkpoint, found {}", ck.section)));
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn sample(values: Vec<f64>) -> Checkpoint {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamStore::new();
        let n = values.len();
        params.add("a", &[n], Init::Zeros, &mut rng);
        params.add("b", &[2, 3], Init::Normal(1.0), &mut rng);
        params.entries_mut()[0].data = values;
        let mut optimizer = AdamState::new(&params);
        optimizer.t = 17;
        optimizer.m[1][4] = -0.25;
        optimizer.v[0].iter_mut().for_each(|v| *v = 1e-300);
        Checkpoint {
            section: SECTION_CVAE.into(),
            config: serde_json::json!({"latent_dim": 4}),
            step: 17,
            params,
            optimizer: Some(optimizer),
        }
    }

    fn bits(ck: &Checkpoint) -> Vec<u64> {
        ck.params.entries().iter().flat_map(|e| e.data.iter().map(|v| v.to_bits())).collect()
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample(vec![0.1, -0.0, f64::MIN_POSITIVE, 1e308]);
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(bits(&back), bits(&ck));
        assert_eq!(back, ck);
    }

    #[test]
    fn truncation_detected() {
        let bytes = encode(&sample(vec![1.0, 2.0]));
        for cut in [1, 8, bytes.len() / 2, bytes.len() - 20] {
            let r = decode(&bytes[..bytes.len() - cut], Path::new("t"));
            assert!(matches!(r, Err(Error::ChecksumMismatch { .. })), "cut {cut}: {r:?}");
        }
    }

    #[test]
    fn bit_flip_detected() {
        let mut bytes = encode(&sample(vec![1.0, 2.0]));
        let n = bytes.len();
        bytes[n - 40] ^= 1;
        assert!(matches!(decode(&bytes, Path::new("t")), Err(Error::ChecksumMismatch { .. })));
    }

    #[test]
    fn old_version_rejected_with_message() {
        let mut bytes = encode(&sample(vec![1.0]));
        bytes[8..12].copy_from_slice(&1u32.to_le_bytes());
        let err = decode(&bytes, Path::new("old.ckpt")).unwrap_err();
        assert!(matches!(err, Error::VersionMismatch { found: 1, expected: FORMAT_VERSION, .. }));
        assert!(err.to_string().contains("version 1"));
    }

    #[test]
    fn section_tag_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&sample(vec![1.0]), &path).unwrap();
        assert!(load_section(&path, SECTION_CLASSIFIER).is_err());
        assert!(load_section(&path, SECTION_CVAE).is_ok());
    }

    proptest! {
        #[test]
        fn arrays_round_trip_bit_identical(values in proptest::collection::vec(any::<f64>(), 0..50)) {
            let ck = sample(values);
            let back = decode(&encode(&ck), Path::new("p")).unwrap();
            prop_assert_eq!(bits(&back), bits(&ck));
        }
    }
}
