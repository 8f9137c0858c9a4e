//! Frame manifests, stratified splitting, and the audited training loader.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::worldgen::io::{read_depth, read_ppm};
use crate::worldgen::{CameraIntrinsics, DepthMap, RgbImage};

const FORMAT: &str = "topodepth-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const DEFAULT_TEST_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub frame_id: usize,
    /// Relative to the manifest's directory.
    pub rgb_path: String,
    pub depth_path: String,
    pub pos_x: f64,
    pub pos_y: f64,
    pub pos_z: f64,
    pub yaw: f64,
    pub arc_length_m: f64,
    pub node_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    scene_hash: String,
    intrinsics: CameraIntrinsics,
    max_depth: f64,
    num_nodes: usize,
    frame_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub scene_hash: String,
    pub intrinsics: CameraIntrinsics,
    /// Largest representable depth; the room diagonal for generated data.
    pub max_depth: f64,
    pub num_nodes: usize,
    pub frames: Vec<FrameRecord>,
    /// Directory that frame paths are relative to.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn rgb_path(&self, frame: &FrameRecord) -> PathBuf {
        self.root.join(&frame.rgb_path)
    }

    pub fn depth_path(&self, frame: &FrameRecord) -> PathBuf {
        self.root.join(&frame.depth_path)
    }

    pub fn frames_in(&self, split: Split) -> Vec<&FrameRecord> {
        self.frames.iter().filter(|f| f.split == Some(split)).collect()
    }

    pub fn is_split(&self) -> bool {
        !self.frames.is_empty() && self.frames.iter().all(|f| f.split.is_some())
    }

    pub fn to_text(&self) -> String {
        let header = Header {
            format: FORMAT.into(),
            version: MANIFEST_VERSION,
            scene_hash: self.scene_hash.clone(),
            intrinsics: self.intrinsics,
            max_depth: self.max_depth,
            num_nodes: self.num_nodes,
            frame_count: self.frames.len(),
        };
        let mut text = serde_json::to_string(&header).expect("header serializes");
        text.push('\n');
        for f in &self.frames {
            text.push_str(&serde_json::to_string(f).expect("record serializes"));
            text.push('\n');
        }
        text
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Parses and validates a manifest; every referenced file must exist.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header: Header = serde_json::from_str(lines.next().unwrap_or(""))
            .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
        if header.format != FORMAT {
            return Err(Error::format(path, format!("not a dataset manifest ({})", header.format)));
        }
        if header.version != MANIFEST_VERSION {
            return Err(Error::VersionMismatch { path: path.into(), found: header.version, expected: MANIFEST_VERSION });
        }
        let frames = lines
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 2)))
            })
            .collect::<Result<Vec<FrameRecord>>>()?;
        if frames.len() != header.frame_count {
            return Err(Error::format(
                path,
                format!("header promises {} frames, found {}", header.frame_count, frames.len()),
            ));
        }
        let manifest = DatasetManifest {
            scene_hash: header.scene_hash,
            intrinsics: header.intrinsics,
            max_depth: header.max_depth,
            num_nodes: header.num_nodes,
            frames,
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        manifest.validate(path)?;
        Ok(manifest)
    }

    fn validate(&self, path: &Path) -> Result<()> {
        self.intrinsics.validate()?;
        let mut seen = std::collections::HashSet::new();
        for f in &self.frames {
            if !seen.insert(f.frame_id) {
                return Err(Error::format(path, format!("duplicate frame_id {}", f.frame_id)));
            }
            if f.node_id >= self.num_nodes {
                return Err(Error::LabelOutOfRange { label: f.node_id, num_nodes: self.num_nodes });
            }
            for file in [self.rgb_path(f), self.depth_path(f)] {
                if !file.is_file() {
                    return Err(Error::format(&file, format!("referenced by frame {} but missing", f.frame_id)));
                }
            }
        }
        Ok(())
    }
}

/// Number of test frames for a node of `count` frames.
///
/// `fraction * count` is nudged down before the ceiling so that products such
/// as 0.1 * 30 = 3.0000000000000004 still give 3.
pub fn test_count(fraction: f64, count: usize) -> usize {
    let raw = fraction * count as f64;
    ((raw - 1e-9 * raw.max(1.0)).ceil().max(0.0) as usize).min(count)
}

/// Stratified per-node split; each node's frames are shuffled with a stream
/// keyed on the node id and the first `test_count` go to test.
pub fn split_dataset(manifest: &DatasetManifest, test_fraction: f64, rng_seed: u64) -> Result<DatasetManifest> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::OutOfRange { value: test_fraction, lo: 0.0, hi: 1.0 });
    }
    let mut by_node: BTreeMap<usize, Vec<usize>> = (0..manifest.num_nodes).map(|n| (n, Vec::new())).collect();
    let mut order: Vec<usize> = (0..manifest.frames.len()).collect();
    order.sort_by_key(|&i| manifest.frames[i].frame_id);
    for i in order {
        let node = manifest.frames[i].node_id;
        by_node
            .get_mut(&node)
            .ok_or(Error::LabelOutOfRange { label: node, num_nodes: manifest.num_nodes })?
            .push(i);
    }
    let mut out = manifest.clone();
    for (node, mut members) in by_node {
        if members.len() < 2 {
            return Err(Error::NodeTooSmall { node, count: members.len() });
        }
        members.shuffle(&mut rng::stream(rng_seed, rng::SPLIT_SHUFFLE, node as u64));
        let k = test_count(test_fraction, members.len());
        for (rank, &i) in members.iter().enumerate() {
            out.frames[i].split = Some(if rank < k { Split::Test } else { Split::Train });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedFrame {
    pub frame_id: usize,
    pub node_id: usize,
    pub rgb: RgbImage,
    pub depth: DepthMap,
}

/// Reads one frame, checking that its rasters match the manifest intrinsics.
pub fn load_frame(manifest: &DatasetManifest, frame: &FrameRecord) -> Result<LoadedFrame> {
    let wrap = |source: Error| Error::Frame { frame_id: frame.frame_id, source: Box::new(source) };
    let rgb = read_ppm(&manifest.rgb_path(frame)).map_err(wrap)?;
    let depth = read_depth(&manifest.depth_path(frame)).map_err(wrap)?;
    let (w, h) = (manifest.intrinsics.width, manifest.intrinsics.height);
    for (gw, gh) in [(rgb.width, rgb.height), (depth.width, depth.height)] {
        if (gw, gh) != (w, h) {
            return Err(wrap(Error::shape(format!("{w}x{h}"), format!("{gw}x{gh}"))));
        }
    }
    Ok(LoadedFrame { frame_id: frame.frame_id, node_id: frame.node_id, rgb, depth })
}

/// Loader used by the training loops. It only hands out train-split frames
/// and records every file it opens.
pub struct TrainLoader<'a> {
    manifest: &'a DatasetManifest,
    accessed: RefCell<Vec<PathBuf>>,
}

impl<'a> TrainLoader<'a> {
    pub fn new(manifest: &'a DatasetManifest) -> Result<Self> {
        if !manifest.is_split() {
            return Err(Error::Config("manifest has no split assignments; run `split` first".into()));
        }
        if manifest.frames_in(Split::Train).is_empty() {
            return Err(Error::Empty("train split"));
        }
        Ok(TrainLoader { manifest, accessed: RefCell::new(Vec::new()) })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        self.manifest
    }

    pub fn train_frames(&self) -> Vec<&'a FrameRecord> {
        self.manifest.frames_in(Split::Train)
    }

    pub fn load(&self, frame: &FrameRecord) -> Result<LoadedFrame> {
        if frame.split != Some(Split::Train) {
            return Err(Error::TestSplitAccess { frame_id: frame.frame_id });
        }
        let mut log = self.accessed.borrow_mut();
        log.push(self.manifest.rgb_path(frame));
        log.push(self.manifest.depth_path(frame));
        drop(log);
        load_frame(self.manifest, frame)
    }

    pub fn load_all(&self) -> Result<Vec<LoadedFrame>> {
        self.train_frames().into_iter().map(|f| self.load(f)).collect()
    }

    /// Every path opened so far, in order.
    pub fn accessed(&self) -> Vec<PathBuf> {
        self.accessed.borrow().clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldgen::io::{write_depth, write_ppm};
    use proptest::prelude::*;

    fn record(frame_id: usize, node_id: usize) -> FrameRecord {
        FrameRecord {
            frame_id,
            rgb_path: format!("f{frame_id}.ppm"),
            depth_path: format!("f{frame_id}.depth"),
            pos_x: 0.1 * frame_id as f64,
            pos_y: 1.0 / 3.0,
            pos_z: 1.0,
            yaw: -std::f64::consts::PI,
            arc_length_m: 0.15 * frame_id as f64,
            node_id,
            split: None,
        }
    }

    fn manifest(nodes: &[usize], root: &Path) -> DatasetManifest {
        DatasetManifest {
            scene_hash: "abc".into(),
            intrinsics: CameraIntrinsics::new(8, 8, 1.0).unwrap(),
            max_depth: 9.0,
            num_nodes: nodes.iter().max().map_or(1, |m| m + 1),
            frames: nodes.iter().enumerate().map(|(i, &n)| record(i, n)).collect(),
            root: root.to_path_buf(),
        }
    }

    fn materialize(m: &DatasetManifest) {
        let rgb = RgbImage::new(8, 8, vec![0.5; 192]).unwrap();
        let depth = DepthMap::new(8, 8, vec![2.0; 64]).unwrap();
        for f in &m.frames {
            write_ppm(&m.rgb_path(f), &rgb).unwrap();
            write_depth(&m.depth_path(f), &depth).unwrap();
        }
    }

    #[test]
    fn ceiling_counts() {
        assert_eq!(test_count(0.1, 10), 1);
        assert_eq!(test_count(0.1, 30), 3);
        assert_eq!(test_count(0.1, 11), 2);
        assert_eq!(test_count(0.0, 50), 0);
        assert_eq!(test_count(0.1, 2), 1);
    }

    #[test]
    fn ten_frame_node_gets_one_test_frame() {
        let m = manifest(&[0; 10], Path::new("."));
        let s = split_dataset(&m, 0.1, 3).unwrap();
        assert_eq!(s.frames_in(Split::Test).len(), 1);
        assert_eq!(s.frames_in(Split::Train).len(), 9);
    }

    #[test]
    fn zero_fraction_all_train() {
        let m = manifest(&[0, 0, 1, 1, 1], Path::new("."));
        let s = split_dataset(&m, 0.0, 3).unwrap();
        assert!(s.frames.iter().all(|f| f.split == Some(Split::Train)));
    }

    #[test]
    fn split_deterministic_and_seed_sensitive() {
        let nodes: Vec<usize> = (0..200).map(|i| i % 4).collect();
        let m = manifest(&nodes, Path::new("."));
        let a = split_dataset(&m, 0.1, 7).unwrap();
        assert_eq!(a, split_dataset(&m, 0.1, 7).unwrap());
        assert_ne!(a, split_dataset(&m, 0.1, 8).unwrap());
    }

    #[test]
    fn tiny_node_rejected() {
        let m = manifest(&[0, 0, 1], Path::new("."));
        assert!(matches!(split_dataset(&m, 0.1, 0), Err(Error::NodeTooSmall { node: 1, count: 1 })));
        let mut gap = manifest(&[0, 0, 2, 2], Path::new("."));
        gap.num_nodes = 3;
        assert!(matches!(split_dataset(&gap, 0.1, 0), Err(Error::NodeTooSmall { node: 1, count: 0 })));
    }

    #[test]
    fn fraction_one_rejected() {
        let m = manifest(&[0, 0], Path::new("."));
        assert!(split_dataset(&m, 1.0, 0).is_err());
    }

    #[test]
    fn manifest_round_trip_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let m = split_dataset(&manifest(&[0, 0, 1, 1, 0], dir.path()), 0.1, 1).unwrap();
        materialize(&m);
        let path = dir.path().join("manifest.jsonl");
        m.write(&path).unwrap();
        assert_eq!(DatasetManifest::read(&path).unwrap(), m);
        fs::remove_file(m.depth_path(&m.frames[3])).unwrap();
        let err = DatasetManifest::read(&path).unwrap_err();
        assert!(err.to_string().contains("f3.depth"), "{err}");
    }

    #[test]
    fn bad_node_rejected_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = manifest(&[0, 1], dir.path());
        materialize(&m);
        m.num_nodes = 1;
        let path = dir.path().join("m.jsonl");
        m.write(&path).unwrap();
        assert!(matches!(DatasetManifest::read(&path), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn loader_refuses_test_frames_and_audits() {
        let dir = tempfile::tempdir().unwrap();
        let m = split_dataset(&manifest(&[0; 10], dir.path()), 0.1, 0).unwrap();
        materialize(&m);
        let loader = TrainLoader::new(&m).unwrap();
        let test = m.frames_in(Split::Test)[0];
        assert!(matches!(loader.load(test), Err(Error::TestSplitAccess { .. })));
        assert_eq!(loader.load_all().unwrap().len(), 9);
        let test_paths = [m.rgb_path(test), m.depth_path(test)];
        assert_eq!(loader.accessed().len(), 18);
        assert!(loader.accessed().iter().all(|p| !test_paths.contains(p)));
    }

    #[test]
    fn loader_requires_split() {
        let m = manifest(&[0, 0], Path::new("."));
        assert!(TrainLoader::new(&m).is_err());
    }

    proptest! {
        #[test]
        fn text_round_trip(xs in proptest::collection::vec((any::<f64>(), -1e3f64..1e3, 0usize..5), 1..20)) {
            let dir = tempfile::tempdir().unwrap();
            let mut m = manifest(&vec![0; xs.len()], dir.path());
            m.num_nodes = 5;
            for (f, &(a, b, n)) in m.frames.iter_mut().zip(&xs) {
                f.pos_x = if a.is_finite() { a } else { 0.0 };
                f.yaw = b;
                f.node_id = n;
            }
            materialize(&m);
            let path = dir.path().join("m.jsonl");
            m.write(&path).unwrap();
            prop_assert_eq!(DatasetManifest::read(&path).unwrap(), m);
        }

        #[test]
        fn every_node_represented_in_test(counts in proptest::collection::vec(2usize..40, 1..6), seed: u64) {
            let nodes: Vec<usize> = counts.iter().enumerate().flat_map(|(n, &c)| std::iter::repeat(n).take(c)).collect();
            let s = split_dataset(&manifest(&nodes, Path::new(".")), 0.1, seed).unwrap();
            for (n, &c) in counts.iter().enumerate() {
                let t = s.frames.iter().filter(|f| f.node_id == n && f.split == Some(Split::Test)).count();
                prop_assert_eq!(t, test_count(0.1, c));
                prop_assert!(t >= 1 && t < c);
            }
        }
    }
}
