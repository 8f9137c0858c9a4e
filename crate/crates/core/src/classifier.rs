//! Small convolutional classifier from an RGB frame to its topological node.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cvae::DOWN_BLOCKS;
use crate::error::{Error, Result};
use crate::nn::{softmax, Adam, AdamState, Conv2d, Gradients, InstanceNorm, Layer, Linear, ParamStore, Sequential, Tensor};
use crate::rng;
use crate::topomap::argmax;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub height: usize,
    pub width: usize,
    pub channels: [usize; DOWN_BLOCKS],
    pub num_nodes: usize,
}

impl ClassifierArch {
    pub fn validate(&self) -> Result<()> {
        let factor = 1 << DOWN_BLOCKS;
        if self.height == 0 || self.width == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::Config(format!("raster {}x{} must be a positive multiple of {factor}", self.width, self.height)));
        }
        if self.num_nodes == 0 || self.channels.contains(&0) {
            return Err(Error::Config("classifier needs >= 1 node and non-zero channel widths".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopoClassifier {
    pub arch: ClassifierArch,
    pub net: Sequential,
}

impl TopoClassifier {
    pub fn new(arch: ClassifierArch, rng: &mut impl Rng) -> Result<(Self, ParamStore)> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        let mut cin = 3;
        for (b, &cout) in arch.channels.iter().enumerate() {
            let name = format!("cls.down{b}");
            layers.push(Layer::Conv(Conv2d::new(&mut store, &format!("{name}.conv"), cin, cout, 4, 2, 1, rng)));
            if (arch.height >> (b + 1)) * (arch.width >> (b + 1)) > 1 {
                layers.push(Layer::Norm(InstanceNorm::new(&mut store, &format!("{name}.norm"), cout, rng)));
            }
            layers.push(Layer::LeakyRelu);
            cin = cout;
        }
        let features = cin * (arch.height >> DOWN_BLOCKS) * (arch.width >> DOWN_BLOCKS);
        layers.push(Layer::Reshape([features, 1, 1]));
        let head_std = 1.0 / (features as f64).sqrt();
        layers.push(Layer::Linear(Linear::new(&mut store, "cls.head", features, arch.num_nodes, head_std, rng)));
        Ok((TopoClassifier { arch, net: Sequential::new(layers) }, store))
    }

    fn input(&self, x: &[f64]) -> Result<Tensor> {
        let want = 3 * self.arch.height * self.arch.width;
        if x.len() != want {
            return Err(Error::shape(format!("rgb raster of {want} values"), x.len()));
        }
        Ok(Tensor::new(3, self.arch.height, self.arch.width, x.to_vec()))
    }
}

/// Node logits for a normalized channel-major RGB raster.
pub fn classify(model: &TopoClassifier, params: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
    Ok(model.net.forward(params, model.input(x)?).into_output().data)
}

/// Predicted node; ties resolve to the lower index.
pub fn predict(model: &TopoClassifier, params: &ParamStore, x: &[f64]) -> Result<usize> {
    Ok(argmax(&classify(model, params, x)?))
}

fn check_labels(model: &TopoClassifier, batch: &[(&[f64], usize)]) -> Result<()> {
    match batch.iter().find(|(_, l)| *l >= model.arch.num_nodes) {
        Some((_, l)) => Err(Error::LabelOutOfRange { label: *l, num_nodes: model.arch.num_nodes }),
        None => Ok(()),
    }
}

/// Mean cross-entropy over the batch, with its gradient when requested.
fn cross_entropy(
    model: &TopoClassifier,
    params: &ParamStore,
    batch: &[(&[f64], usize)],
    mut grads: Option<&mut Gradients>,
) -> Result<(f64, usize)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_labels(model, batch)?;
    let inv = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut correct = 0;
    for (x, label) in batch {
        let trace = model.net.forward(params, model.input(x)?);
        let logits = &trace.output().data;
        let probs = softmax(logits);
        loss -= probs[*label].max(f64::MIN_POSITIVE).ln() * inv;
        if argmax(logits) == *label {
            correct += 1;
        }
        if let Some(g) = grads.as_deref_mut() {
            let d: Vec<f64> = probs.iter().enumerate().map(|(k, p)| (p - if k == *label { 1.0 } else { 0.0 }) * inv).collect();
            model.net.backward(params, &trace, Tensor::vector(d), g);
        }
    }
    Ok((loss, correct))
}

pub fn cross_entropy_loss(model: &TopoClassifier, params: &ParamStore, batch: &[(&[f64], usize)]) -> Result<f64> {
    Ok(cross_entropy(model, params, batch, None)?.0)
}

pub fn cross_entropy_and_grad(
    model: &TopoClassifier,
    params: &ParamStore,
    batch: &[(&[f64], usize)],
) -> Result<(f64, Gradients)> {
    let mut grads = params.zero_grads();
    let (loss, _) = cross_entropy(model, params, batch, Some(&mut grads))?;
    Ok((loss, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub rng_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierLog {
    pub step: u64,
    pub loss: f64,
    pub batch_accuracy: f64,
}

pub fn classifier_train_step(
    model: &TopoClassifier,
    params: &mut ParamStore,
    state: &mut AdamState,
    batch: &[(&[f64], usize)],
    learning_rate: f64,
) -> Result<ClassifierLog> {
    let mut grads = params.zero_grads();
    let (loss, correct) = cross_entropy(model, params, batch, Some(&mut grads))?;
    let step = state.t + 1;
    if !loss.is_finite() || !grads.arrays().iter().all(|a| a.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFiniteLoss { step });
    }
    Adam::new(learning_rate).step(params, &grads, state);
    Ok(ClassifierLog { step, loss, batch_accuracy: correct as f64 / batch.len() as f64 })
}

/// Indices of the minibatch for `step`, drawn without replacement.
pub fn batch_indices(seed: u64, step: u64, len: usize, batch_size: usize) -> Vec<usize> {
    let mut rng = rng::stream(seed, rng::BATCH_ORDER, step);
    let k = batch_size.min(len);
    let mut pool: Vec<usize> = (0..len).collect();
    for i in 0..k {
        let j = rng.gen_range(i..len);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Cross-entropy training with Adam; every label is validated first.
pub fn train_classifier(
    model: &TopoClassifier,
    params: &mut ParamStore,
    dataset: &[(&[f64], usize)],
    config: &ClassifierTrainConfig,
) -> Result<Vec<ClassifierLog>> {
    if dataset.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_labels(model, dataset)?;
    let mut state = AdamState::new(params);
    let mut log = Vec::with_capacity(config.steps as usize);
    for step in 0..config.steps {
        let batch: Vec<(&[f64], usize)> =
            batch_indices(config.rng_seed, step, dataset.len(), config.batch_size).into_iter().map(|i| dataset[i]).collect();
        log.push(classifier_train_step(model, params, &mut state, &batch, config.learning_rate)?);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arch() -> ClassifierArch {
        ClassifierArch { height: 8, width: 8, channels: [2, 3, 4], num_nodes: 3 }
    }

    fn model() -> (TopoClassifier, ParamStore) {
        TopoClassifier::new(arch(), &mut rng::stream(3, rng::WEIGHT_INIT, 1)).unwrap()
    }

    fn image(seed: usize) -> Vec<f64> {
        (0..192).map(|i| ((i * 31 + seed * 17) % 29) as f64 / 29.0).collect()
    }

    #[test]
    fn zero_params_predict_node_zero() {
        let (m, mut p) = model();
        for e in p.entries_mut() {
            e.data.fill(0.0);
        }
        assert_eq!(classify(&m, &p, &image(1)).unwrap(), vec![0.0; 3]);
        assert_eq!(predict(&m, &p, &image(1)).unwrap(), 0);
    }

    #[test]
    fn classify_is_pure_and_checks_shape() {
        let (m, p) = model();
        assert_eq!(classify(&m, &p, &image(2)).unwrap(), classify(&m, &p, &image(2)).unwrap());
        assert!(matches!(classify(&m, &p, &[0.0; 64]), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn single_sample_overfits() {
        let (m, mut p) = model();
        let x = image(4);
        let data = [(x.as_slice(), 2usize)];
        let config = ClassifierTrainConfig { learning_rate: 1e-2, batch_size: 1, steps: 50, rng_seed: 0 };
        let log = train_classifier(&m, &mut p, &data, &config).unwrap();
        assert_eq!(log.len(), 50);
        assert_eq!(predict(&m, &p, &x).unwrap(), 2);
    }

    #[test]
    fn zero_rate_leaves_params() {
        let (m, mut p) = model();
        let before = p.clone();
        let x = image(4);
        let mut state = AdamState::new(&p);
        classifier_train_step(&m, &mut p, &mut state, &[(x.as_slice(), 1)], 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn out_of_range_label_rejected_before_training() {
        let (m, mut p) = model();
        let before = p.clone();
        let (a, b) = (image(1), image(2));
        let data = [(a.as_slice(), 0usize), (b.as_slice(), 3usize)];
        let config = ClassifierTrainConfig { learning_rate: 1e-2, batch_size: 1, steps: 5, rng_seed: 0 };
        assert!(matches!(train_classifier(&m, &mut p, &data, &config), Err(Error::LabelOutOfRange { label: 3, .. })));
        assert_eq!(p, before);
    }

    #[test]
    fn batches_are_distinct_indices() {
        let idx = batch_indices(1, 7, 20, 8);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 8);
        assert_eq!(idx, batch_indices(1, 7, 20, 8));
        assert_eq!(batch_indices(1, 0, 3, 8).len(), 3);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(logits in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
            let s: f64 = softmax(&logits).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn argmax_shift_invariant(logits in proptest::collection::vec(-50.0f64..50.0, 1..12), c in -100.0f64..100.0) {
            let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
            prop_assert_eq!(argmax(&logits), argmax(&shifted));
        }
    }
}
