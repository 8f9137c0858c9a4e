use std::fs;
use std::path::Path;

use rand::RngCore;

use super::io::{write_depth, write_ppm};
use super::{punch_holes, render_frame, trajectory_samples, CameraIntrinsics, Scene, TrajectoryParams};
use crate::dataset::{DatasetManifest, FrameRecord};
use crate::error::{Error, Result};
use crate::rng;
use crate::topomap::TopoMap;

pub const FRAMES_DIR: &str = "frames";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerateOptions {
    /// Fraction of depth pixels replaced by holes, simulating stereo dropouts.
    pub hole_rate: f64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions { hole_rate: 0.0 }
    }
}

/// Renders every trajectory pose into `out_dir/frames` and writes
/// `out_dir/manifest.jsonl`. Poses that land inside an obstacle are skipped
/// and counted; frame ids stay dense.
pub fn generate_dataset(
    scene: &Scene,
    params: &TrajectoryParams,
    intrinsics: &CameraIntrinsics,
    topomap: &TopoMap,
    out_dir: &Path,
    options: &GenerateOptions,
) -> Result<DatasetManifest> {
    intrinsics.validate()?;
    if !(0.0..1.0).contains(&options.hole_rate) {
        return Err(Error::OutOfRange { value: options.hole_rate, lo: 0.0, hi: 1.0 });
    }
    let samples = trajectory_samples(params)?;
    let frames_dir = out_dir.join(FRAMES_DIR);
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;

    let mut frames = Vec::with_capacity(samples.len());
    let mut skipped = 0usize;
    for (index, sample) in samples.iter().enumerate() {
        let (rgb, depth) = match render_frame(scene, &sample.pose, intrinsics) {
            Ok(pair) => pair,
            Err(Error::PoseInsideObstacle { .. }) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let hole_seed = rng::stream(params.rng_seed, rng::HOLE_PUNCH, index as u64).next_u64();
        let depth = punch_holes(&depth, options.hole_rate, hole_seed)?;
        let frame_id = frames.len();
        let rgb_path = format!("{FRAMES_DIR}/{frame_id:06}.ppm");
        let depth_path = format!("{FRAMES_DIR}/{frame_id:06}.depth");
        write_ppm(&out_dir.join(&rgb_path), &rgb)?;
        write_depth(&out_dir.join(&depth_path), &depth)?;
        let [x, y, z] = sample.pose.position;
        frames.push(FrameRecord {
            frame_id,
            rgb_path,
            depth_path,
            pos_x: x,
            pos_y: y,
            pos_z: z,
            yaw: sample.pose.yaw,
            arc_length_m: sample.arc_length,
            node_id: topomap.assign_node(sample.pose.planar()),
            split: None,
        });
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} of {} poses inside obstacles", samples.len());
    }
    if frames.is_empty() {
        return Err(Error::Empty("rendered frames"));
    }
    let manifest = DatasetManifest {
        scene_hash: scene.content_hash(),
        intrinsics: *intrinsics,
        max_depth: scene.diagonal(),
        num_nodes: topomap.len(),
        frames,
        root: out_dir.to_path_buf(),
    };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    log::info!("wrote {} frames to {}", manifest.frames.len(), out_dir.display());
    Ok(manifest)
}
