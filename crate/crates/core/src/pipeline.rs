//! End-to-end stages: data generation, splitting, training, evaluation, and
//! sampling. Each stage reads and writes files under the configured data and
//! run directories so stages can run as separate processes.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_section, save_checkpoint, Checkpoint, SECTION_CLASSIFIER, SECTION_CVAE};
use crate::classifier::{batch_indices, classifier_train_step, predict, ClassifierArch, ClassifierLog, TopoClassifier};
use crate::config::RunConfig;
use crate::cvae::{draw_epsilon, infer_depth, sample_node, train_step, ArchConfig, Cvae, LossRecord, Sample, TrainConfig};
use crate::dataset::{load_frame, split_dataset, DatasetManifest, Split, TrainLoader};
use crate::error::{Error, Result};
use crate::metrics::{topo_metrics, DepthAccumulator, MetricsReport};
use crate::nn::{AdamState, ParamStore};
use crate::preprocess::{fill_holes, normalize_depth, rgb_planes, NormalizationSpec};
use crate::rng;
use crate::topomap::{build_topomap, TopoMap};
use crate::worldgen::io::{write_depth, write_ppm};
use crate::worldgen::{build_scene, generate_dataset, generate_trajectory, GenerateOptions, Pose, Scene};

pub const TOPOMAP_FILE: &str = "topomap.jsonl";
pub const CVAE_CHECKPOINT: &str = "cvae.ckpt";
pub const CLASSIFIER_CHECKPOINT: &str = "classifier.ckpt";
pub const CVAE_LOG: &str = "cvae_log.jsonl";
pub const CLASSIFIER_LOG: &str = "classifier_log.jsonl";

pub fn topomap_path(config: &RunConfig) -> PathBuf {
    config.data_dir.join(TOPOMAP_FILE)
}

pub fn cvae_checkpoint_path(config: &RunConfig) -> PathBuf {
    config.run_dir.join(CVAE_CHECKPOINT)
}

pub fn classifier_checkpoint_path(config: &RunConfig) -> PathBuf {
    config.run_dir.join(CLASSIFIER_CHECKPOINT)
}

pub fn load_scene(config: &RunConfig) -> Result<Scene> {
    build_scene(config.scene_config()?)
}

/// One noise-free lap on the route, closed by repeating its first pose.
pub fn reference_route(config: &RunConfig) -> Result<Vec<Pose>> {
    let mut poses = generate_trajectory(&config.trajectory_params().reference())?;
    if let Some(&first) = poses.first() {
        poses.push(first);
    }
    Ok(poses)
}

pub fn build_topomap_stage(config: &RunConfig) -> Result<TopoMap> {
    let map = build_topomap(&reference_route(config)?, config.data.node_spacing)?;
    fs::create_dir_all(&config.data_dir).map_err(|e| Error::io(&config.data_dir, e))?;
    map.write(&topomap_path(config))?;
    log::info!("topological map: {} nodes over {:.2} m", map.len(), map.route_length());
    Ok(map)
}

/// Builds the topological map and renders the whole dataset.
pub fn gen_data(config: &RunConfig) -> Result<DatasetManifest> {
    let scene = load_scene(config)?;
    let map = build_topomap_stage(config)?;
    let options = GenerateOptions { hole_rate: config.data.hole_rate };
    generate_dataset(&scene, &config.trajectory_params(), &config.intrinsics()?, &map, &config.data_dir, &options)
}

/// Assigns train/test labels in place in the manifest file.
pub fn split_stage(config: &RunConfig) -> Result<DatasetManifest> {
    let path = config.manifest_path();
    let manifest = split_dataset(&DatasetManifest::read(&path)?, config.data.test_fraction, config.seed)?;
    manifest.write(&path)?;
    log::info!(
        "split: {} train, {} test",
        manifest.frames_in(Split::Train).len(),
        manifest.frames_in(Split::Test).len()
    );
    Ok(manifest)
}

pub fn normalization(config: &RunConfig, manifest: &DatasetManifest) -> Result<NormalizationSpec> {
    NormalizationSpec::new(config.data.max_depth.unwrap_or(manifest.max_depth))
}

/// Train-split tensors: channel-major RGB, hole-filled normalized depth, node.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub rgb: Vec<Vec<f64>>,
    pub depth: Vec<Vec<f64>>,
    pub nodes: Vec<usize>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn samples(&self, indices: &[usize]) -> Vec<Sample<'_>> {
        indices.iter().map(|&i| Sample { rgb: &self.rgb[i], depth: &self.depth[i], node: self.nodes[i] }).collect()
    }
}

pub fn load_training_set(config: &RunConfig, loader: &TrainLoader, spec: &NormalizationSpec) -> Result<TrainingSet> {
    let mut set = TrainingSet { rgb: Vec::new(), depth: Vec::new(), nodes: Vec::new() };
    for frame in loader.load_all()? {
        let wrap = |source: Error| Error::Frame { frame_id: frame.frame_id, source: Box::new(source) };
        let filled = fill_holes(&frame.depth, config.data.fill_tol, config.data.fill_max_iters).map_err(wrap)?;
        set.depth.push(normalize_depth(&filled, spec).map_err(wrap)?.values);
        set.rgb.push(rgb_planes(&frame.rgb));
        set.nodes.push(frame.node_id);
    }
    Ok(set)
}

/// Model-defining part of a CVAE checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvaeMeta {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub max_depth: f64,
    pub scene_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMeta {
    pub arch: ClassifierArch,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub scene_hash: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainOptions {
    /// Stop (and checkpoint) after this many steps in this invocation.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub start_step: u64,
    pub end_step: u64,
    pub checkpoint: PathBuf,
}

/// Keeps log lines whose step is at most `step`; returns an append handle.
fn reopen_log(path: &Path, step: u64) -> Result<File> {
    #[derive(Deserialize)]
    struct Step {
        step: u64,
    }
    let mut kept = String::new();
    if step > 0 && path.exists() {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            match serde_json::from_str::<Step>(&line) {
                Ok(s) if s.step <= step => {
                    kept.push_str(&line);
                    kept.push('\n');
                }
                _ => {}
            }
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))?;
    OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))
}

fn append_log(file: &mut File, path: &Path, line: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string(line).expect("log line serializes");
    text.push('\n');
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn meta_mismatch(path: &Path, what: &str) -> Error {
    Error::Config(format!(
        "{} was trained with a different {what}; use a fresh run_dir or restore the original settings",
        path.display()
    ))
}

/// Trains the CVAE on the train split, resuming from the run directory's
/// checkpoint when one exists.
pub fn train_cvae(config: &RunConfig, options: &TrainOptions) -> Result<TrainSummary> {
    config.validate()?;
    let manifest = DatasetManifest::read(&config.manifest_path())?;
    let loader = TrainLoader::new(&manifest)?;
    let spec = normalization(config, &manifest)?;
    let train = config.train_config();
    let meta = CvaeMeta {
        arch: config.cvae_arch(manifest.num_nodes),
        train: train.clone(),
        max_depth: spec.max_depth,
        scene_hash: manifest.scene_hash.clone(),
    };
    let (model, mut params) = Cvae::new(meta.arch.clone(), &mut rng::stream(config.seed, rng::WEIGHT_INIT, 0))?;
    let mut state = AdamState::new(&params);
    let ckpt_path = cvae_checkpoint_path(config);
    let mut start = 0;
    if ckpt_path.exists() {
        let ck = load_section(&ckpt_path, SECTION_CVAE)?;
        let saved: CvaeMeta =
            serde_json::from_value(ck.config).map_err(|e| Error::format(&ckpt_path, e.to_string()))?;
        let comparable = |m: &CvaeMeta| CvaeMeta { train: TrainConfig { steps: 0, ..m.train.clone() }, ..m.clone() };
        if comparable(&saved) != comparable(&meta) || !ck.params.same_layout(&params) {
            return Err(meta_mismatch(&ckpt_path, "configuration"));
        }
        params = ck.params;
        state = ck.optimizer.ok_or_else(|| Error::format(&ckpt_path, "missing optimizer state"))?;
        start = ck.step;
        log::info!("resuming CVAE training from step {start}");
    }
    let data = load_training_set(config, &loader, &spec)?;
    fs::create_dir_all(&config.run_dir).map_err(|e| Error::io(&config.run_dir, e))?;
    let log_path = config.run_dir.join(CVAE_LOG);
    let mut log_file = reopen_log(&log_path, start)?;
    let end = options.stop_after.map_or(train.steps, |n| train.steps.min(start + n));
    let save = |params: &ParamStore, state: &AdamState, step: u64| {
        let ck = Checkpoint {
            section: SECTION_CVAE.into(),
            config: serde_json::to_value(&meta).expect("meta serializes"),
            step,
            params: params.clone(),
            optimizer: Some(state.clone()),
        };
        save_checkpoint(&ck, &ckpt_path)
    };
    for step in start..end {
        let indices = batch_indices(config.seed, step, data.len(), train.batch_size);
        let eps = draw_epsilon(&mut rng::stream(config.seed, rng::EPSILON, step), indices.len(), train.latent_dim);
        let record: LossRecord = train_step(&model, &mut params, &mut state, &data.samples(&indices), &eps, &train)?;
        append_log(&mut log_file, &log_path, &record)?;
        if record.step % 100 == 0 {
            log::info!("cvae step {} total {:.5}", record.step, record.total);
        }
        if record.step % config.cvae.checkpoint_every == 0 {
            save(&params, &state, record.step)?;
        }
    }
    save(&params, &state, end.max(start))?;
    Ok(TrainSummary { start_step: start, end_step: end.max(start), checkpoint: ckpt_path })
}

/// Trains the topological classifier on train-split RGB frames; resumable.
pub fn train_classifier(config: &RunConfig, options: &TrainOptions) -> Result<TrainSummary> {
    config.validate()?;
    let manifest = DatasetManifest::read(&config.manifest_path())?;
    let loader = TrainLoader::new(&manifest)?;
    let c = &config.classifier;
    let meta = ClassifierMeta {
        arch: config.classifier_arch(manifest.num_nodes),
        learning_rate: c.learning_rate,
        batch_size: c.batch_size,
        seed: config.seed,
        scene_hash: manifest.scene_hash.clone(),
    };
    let (model, mut params) = TopoClassifier::new(meta.arch.clone(), &mut rng::stream(config.seed, rng::WEIGHT_INIT, 1))?;
    let mut state = AdamState::new(&params);
    let ckpt_path = classifier_checkpoint_path(config);
    let mut start = 0;
    if ckpt_path.exists() {
        let ck = load_section(&ckpt_path, SECTION_CLASSIFIER)?;
        let saved: ClassifierMeta =
            serde_json::from_value(ck.config).map_err(|e| Error::format(&ckpt_path, e.to_string()))?;
        if saved != meta || !ck.params.same_layout(&params) {
            return Err(meta_mismatch(&ckpt_path, "configuration"));
        }
        params = ck.params;
        state = ck.optimizer.ok_or_else(|| Error::format(&ckpt_path, "missing optimizer state"))?;
        start = ck.step;
        log::info!("resuming classifier training from step {start}");
    }
    let frames = loader.load_all()?;
    let inputs: Vec<(Vec<f64>, usize)> = frames.iter().map(|f| (rgb_planes(&f.rgb), f.node_id)).collect();
    fs::create_dir_all(&config.run_dir).map_err(|e| Error::io(&config.run_dir, e))?;
    let log_path = config.run_dir.join(CLASSIFIER_LOG);
    let mut log_file = reopen_log(&log_path, start)?;
    let end = options.stop_after.map_or(c.steps, |n| c.steps.min(start + n));
    let save = |params: &ParamStore, state: &AdamState, step: u64| {
        let ck = Checkpoint {
            section: SECTION_CLASSIFIER.into(),
            config: serde_json::to_value(&meta).expect("meta serializes"),
            step,
            params: params.clone(),
            optimizer: Some(state.clone()),
        };
        save_checkpoint(&ck, &ckpt_path)
    };
    for step in start..end {
        let batch: Vec<(&[f64], usize)> = batch_indices(config.seed, step, inputs.len(), c.batch_size)
            .into_iter()
            .map(|i| (inputs[i].0.as_slice(), inputs[i].1))
            .collect();
        let entry: ClassifierLog = classifier_train_step(&model, &mut params, &mut state, &batch, c.learning_rate)?;
        append_log(&mut log_file, &log_path, &entry)?;
        if entry.step % 100 == 0 {
            log::info!("classifier step {} loss {:.5}", entry.step, entry.loss);
        }
        if entry.step % c.checkpoint_every == 0 {
            save(&params, &state, entry.step)?;
        }
    }
    save(&params, &state, end.max(start))?;
    Ok(TrainSummary { start_step: start, end_step: end.max(start), checkpoint: ckpt_path })
}

pub struct TrainedCvae {
    pub model: Cvae,
    pub params: ParamStore,
    pub meta: CvaeMeta,
}

pub struct TrainedClassifier {
    pub model: TopoClassifier,
    pub params: ParamStore,
    pub meta: ClassifierMeta,
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found")))
    }
}

pub fn load_cvae(path: &Path) -> Result<TrainedCvae> {
    require_file(path)?;
    let ck = load_section(path, SECTION_CVAE)?;
    let meta: CvaeMeta = serde_json::from_value(ck.config).map_err(|e| Error::format(path, e.to_string()))?;
    // weights come from the file; the init stream only fixes the layout
    let (model, fresh) = Cvae::new(meta.arch.clone(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
    if !fresh.same_layout(&ck.params) {
        return Err(Error::format(path, "parameter layout does not match its architecture"));
    }
    Ok(TrainedCvae { model, params: ck.params, meta })
}

pub fn load_classifier(path: &Path) -> Result<TrainedClassifier> {
    require_file(path)?;
    let ck = load_section(path, SECTION_CLASSIFIER)?;
    let meta: ClassifierMeta = serde_json::from_value(ck.config).map_err(|e| Error::format(path, e.to_string()))?;
    let (model, fresh) = TopoClassifier::new(meta.arch.clone(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
    if !fresh.same_layout(&ck.params) {
        return Err(Error::format(path, "parameter layout does not match its architecture"));
    }
    Ok(TrainedClassifier { model, params: ck.params, meta })
}

/// Classifies each frame, infers depth conditioned on the predicted node, and
/// scores it against the (unfilled) ground truth. Frames are visited in
/// ascending id order so the report is bit-stable. With `oracle_node`, depth
/// conditioned on the true node is scored as well.
pub fn evaluate_split(
    cvae: &TrainedCvae,
    classifier: &TrainedClassifier,
    manifest: &DatasetManifest,
    split: Split,
    map: &TopoMap,
    oracle_node: bool,
) -> Result<MetricsReport> {
    let spec = NormalizationSpec::new(cvae.meta.max_depth)?;
    let mut frames = manifest.frames_in(split);
    if frames.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    frames.sort_by_key(|f| f.frame_id);
    let mut acc = DepthAccumulator::new();
    let mut oracle = DepthAccumulator::new();
    let (mut predictions, mut truths) = (Vec::new(), Vec::new());
    for record in frames {
        let wrap = |source: Error| match source {
            e @ Error::Frame { .. } => e,
            e => Error::Frame { frame_id: record.frame_id, source: Box::new(e) },
        };
        let frame = load_frame(manifest, record)?;
        let planes = rgb_planes(&frame.rgb);
        let node = predict(&classifier.model, &classifier.params, &planes).map_err(wrap)?;
        let estimate = infer_depth(&cvae.model, &cvae.params, &frame.rgb, node, &spec).map_err(wrap)?;
        acc.add(&estimate, &frame.depth, None).map_err(wrap)?;
        if oracle_node {
            let estimate = infer_depth(&cvae.model, &cvae.params, &frame.rgb, frame.node_id, &spec).map_err(wrap)?;
            oracle.add(&estimate, &frame.depth, None).map_err(wrap)?;
        }
        predictions.push(node);
        truths.push(frame.node_id);
    }
    let topo = topo_metrics(&predictions, &truths, map.len(), map.is_loop())?;
    let oracle = if oracle_node { Some(oracle.finish()?) } else { None };
    Ok(MetricsReport::new(acc.finish()?, topo, predictions.len(), oracle))
}

/// Loads both checkpoints and evaluates one split of the configured dataset.
pub fn evaluate(config: &RunConfig, split: Split, oracle_node: bool) -> Result<MetricsReport> {
    let cvae = load_cvae(&cvae_checkpoint_path(config))?;
    let classifier = load_classifier(&classifier_checkpoint_path(config))?;
    let manifest = DatasetManifest::read(&config.manifest_path())?;
    if cvae.meta.scene_hash != manifest.scene_hash {
        log::warn!("CVAE checkpoint was trained on a different scene");
    }
    let map = TopoMap::read(&topomap_path(config))?;
    evaluate_split(&cvae, &classifier, &manifest, split, &map, oracle_node)
}

/// Writes `count` hallucinated RGB/depth pairs for `node` into `out_dir`.
pub fn sample_stage(config: &RunConfig, node: usize, count: usize, out_dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let cvae = load_cvae(&cvae_checkpoint_path(config))?;
    let spec = NormalizationSpec::new(cvae.meta.max_depth)?;
    cvae.model.condition(node)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = rng::stream(config.seed, rng::SAMPLING, node as u64);
    let mut written = Vec::with_capacity(count);
    for i in 0..count {
        let (rgb, depth) = sample_node(&cvae.model, &cvae.params, node, &spec, &mut rng)?;
        let rgb_path = out_dir.join(format!("node{node:03}_{i:04}.ppm"));
        let depth_path = out_dir.join(format!("node{node:03}_{i:04}.depth"));
        write_ppm(&rgb_path, &rgb)?;
        write_depth(&depth_path, &depth)?;
        written.push((rgb_path, depth_path));
    }
    Ok(written)
}
