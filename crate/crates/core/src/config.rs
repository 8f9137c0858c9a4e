//! Run configuration: a TOML file, dotted `key=value` overrides, and defaults
//! for every field.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierArch;
use crate::cvae::{ArchConfig, Conditioning, TrainConfig, DOWN_BLOCKS};
use crate::error::{Error, Result};
use crate::preprocess::{DEFAULT_FILL_MAX_ITERS, DEFAULT_FILL_TOL};
use crate::topomap::DEFAULT_SPACING;
use crate::worldgen::{CameraIntrinsics, SceneConfig, TrajectoryParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every random stream is derived from it.
    pub seed: u64,
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
    pub data: DataConfig,
    pub cvae: CvaeConfig,
    pub classifier: ClassifierConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Scene description (TOML); the built-in living room when unset.
    pub scene: Option<PathBuf>,
    /// Closed route; the living-room square when unset.
    pub waypoints: Option<Vec<[f64; 2]>>,
    pub width: usize,
    pub height: usize,
    pub horizontal_fov: f64,
    pub frame_spacing: f64,
    pub lateral_offset_step: f64,
    pub offset_variants: usize,
    pub num_laps: usize,
    pub noise_std: f64,
    pub camera_height: f64,
    pub hole_rate: f64,
    pub node_spacing: f64,
    pub test_fraction: f64,
    /// Depth normalization ceiling; the scene diagonal when unset.
    pub max_depth: Option<f64>,
    pub fill_tol: f64,
    pub fill_max_iters: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvaeConfig {
    pub latent_dim: usize,
    pub kl_weight: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub kl_dedup: bool,
    pub shared_trunk: bool,
    pub conditioning: Conditioning,
    pub channels: [usize; DOWN_BLOCKS],
    pub checkpoint_every: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub channels: [usize; DOWN_BLOCKS],
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data_dir: "data".into(),
            run_dir: "run".into(),
            data: DataConfig::default(),
            cvae: CvaeConfig::default(),
            classifier: ClassifierConfig::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            scene: None,
            waypoints: None,
            width: 32,
            height: 32,
            horizontal_fov: 1.2,
            frame_spacing: 0.15,
            lateral_offset_step: 0.5,
            offset_variants: 3,
            num_laps: 6,
            noise_std: 0.05,
            camera_height: 1.0,
            hole_rate: 0.05,
            node_spacing: DEFAULT_SPACING,
            test_fraction: 0.1,
            max_depth: None,
            fill_tol: DEFAULT_FILL_TOL,
            fill_max_iters: DEFAULT_FILL_MAX_ITERS,
        }
    }
}

impl Default for CvaeConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        CvaeConfig {
            latent_dim: t.latent_dim,
            kl_weight: t.kl_weight,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            steps: t.steps,
            kl_dedup: t.kl_dedup,
            shared_trunk: t.shared_trunk,
            conditioning: Conditioning::OneHot,
            channels: [8, 16, 32],
            checkpoint_every: 500,
        }
    }
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { channels: [8, 16, 32], learning_rate: 1e-3, batch_size: 16, steps: 1000, checkpoint_every: 500 }
    }
}

/// Sets `dotted.key = value` in a TOML table. The value is parsed as a TOML
/// literal and falls back to a bare string.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        node = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a section")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Builds a validated config from an optional file, overrides, and seed.
    pub fn resolve(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>().map_err(|e| Error::format(p, e.to_string()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        if let Some(s) = seed {
            let s = i64::try_from(s).map_err(|_| Error::Config(format!("seed {s} exceeds {}", i64::MAX)))?;
            table.insert("seed".into(), toml::Value::Integer(s));
        }
        let config: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        self.intrinsics()?;
        let checks: [(bool, &str); 10] = [
            (d.frame_spacing > 0.0, "data.frame_spacing must be > 0"),
            (d.num_laps >= 1, "data.num_laps must be >= 1"),
            (d.offset_variants >= 1, "data.offset_variants must be >= 1"),
            (d.noise_std >= 0.0, "data.noise_std must be >= 0"),
            ((0.0..1.0).contains(&d.hole_rate), "data.hole_rate must be in [0, 1)"),
            (d.node_spacing > 0.0, "data.node_spacing must be > 0"),
            ((0.0..1.0).contains(&d.test_fraction), "data.test_fraction must be in [0, 1)"),
            (d.max_depth.map_or(true, |m| m > 0.0), "data.max_depth must be > 0"),
            (self.cvae.checkpoint_every >= 1, "cvae.checkpoint_every must be >= 1"),
            (self.classifier.checkpoint_every >= 1, "classifier.checkpoint_every must be >= 1"),
        ];
        if let Some((_, msg)) = checks.iter().find(|(ok, _)| !ok) {
            return Err(Error::Config(msg.to_string()));
        }
        if !(d.fill_tol > 0.0) || d.fill_max_iters == 0 {
            return Err(Error::Config("data.fill_tol must be > 0 and data.fill_max_iters >= 1".into()));
        }
        self.train_config().validate()?;
        self.cvae_arch(1).validate()?;
        self.classifier_arch(1).validate()?;
        if self.classifier.batch_size == 0 || !(self.classifier.learning_rate >= 0.0) {
            return Err(Error::Config("classifier.batch_size must be >= 1 and learning_rate >= 0".into()));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(self.data.width, self.data.height, self.data.horizontal_fov)
    }

    pub fn scene_config(&self) -> Result<SceneConfig> {
        match &self.data.scene {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str(&text).map_err(|e| Error::format(p, e.to_string()))
            }
            None => Ok(SceneConfig::living_room()),
        }
    }

    pub fn trajectory_params(&self) -> TrajectoryParams {
        let d = &self.data;
        TrajectoryParams {
            waypoints: d.waypoints.clone().unwrap_or_else(SceneConfig::living_room_route),
            frame_spacing: d.frame_spacing,
            lateral_offset_step: d.lateral_offset_step,
            offset_variants: d.offset_variants,
            num_laps: d.num_laps,
            noise_std: d.noise_std,
            camera_height: d.camera_height,
            rng_seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let c = &self.cvae;
        TrainConfig {
            latent_dim: c.latent_dim,
            kl_weight: c.kl_weight,
            learning_rate: c.learning_rate,
            batch_size: c.batch_size,
            steps: c.steps,
            rng_seed: self.seed,
            kl_dedup: c.kl_dedup,
            shared_trunk: c.shared_trunk,
        }
    }

    pub fn cvae_arch(&self, num_nodes: usize) -> ArchConfig {
        ArchConfig {
            height: self.data.height,
            width: self.data.width,
            latent_dim: self.cvae.latent_dim,
            num_nodes,
            channels: self.cvae.channels,
            shared_trunk: self.cvae.shared_trunk,
            conditioning: self.cvae.conditioning,
        }
    }

    pub fn classifier_arch(&self, num_nodes: usize) -> ClassifierArch {
        ClassifierArch {
            height: self.data.height,
            width: self.data.width,
            channels: self.classifier.channels,
            num_nodes,
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.data_dir.join(crate::worldgen::MANIFEST_FILE)
    }
}
