use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::arch::{Cvae, Domain, EncoderPass};
use super::sample_latent;
use crate::error::{Error, Result};
use crate::nn::{mse_with_grad, Adam, AdamState, Gradients, ParamStore, Tensor};

/// One paired training example in normalized, channel-major form.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub rgb: &'a [f64],
    pub depth: &'a [f64],
    pub node: usize,
}

/// Standard-normal noise for both encoders of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EpsilonDraw {
    pub rgb: Vec<f64>,
    pub dep: Vec<f64>,
}

impl EpsilonDraw {
    pub fn zeros(latent_dim: usize) -> Self {
        EpsilonDraw { rgb: vec![0.0; latent_dim], dep: vec![0.0; latent_dim] }
    }
}

pub fn draw_epsilon(rng: &mut impl Rng, count: usize, latent_dim: usize) -> Vec<EpsilonDraw> {
    (0..count)
        .map(|_| EpsilonDraw {
            rgb: (0..latent_dim).map(|_| rng.sample(StandardNormal)).collect(),
            dep: (0..latent_dim).map(|_| rng.sample(StandardNormal)).collect(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub latent_dim: usize,
    pub kl_weight: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub rng_seed: u64,
    pub kl_dedup: bool,
    pub shared_trunk: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            latent_dim: 32,
            kl_weight: 1.0,
            learning_rate: 1e-3,
            batch_size: 16,
            steps: 2000,
            rng_seed: 0,
            kl_dedup: false,
            shared_trunk: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be >= 1".into()));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::Config(format!("kl_weight must be >= 0, got {}", self.kl_weight)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Batch-averaged loss terms. Each `l_*` term is its reconstruction MSE plus
/// `kl_weight` times the KL of the encoder that produced the latent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub l_rgb_rgb: f64,
    pub l_dep_dep: f64,
    pub l_rgb_dep: f64,
    pub l_dep_rgb: f64,
    pub kl_rgb: f64,
    pub kl_dep: f64,
    pub total: f64,
    pub kl_weight: f64,
    /// When set, each encoder's KL enters `total` once instead of twice.
    pub kl_dedup: bool,
}

impl LossRecord {
    /// `total` recomputed from the terms under the record's dedup mode.
    pub fn expected_total(&self) -> f64 {
        let sum = self.l_rgb_rgb + self.l_dep_dep + self.l_rgb_dep + self.l_dep_rgb;
        if self.kl_dedup {
            sum - self.kl_weight * (self.kl_rgb + self.kl_dep)
        } else {
            sum
        }
    }

    fn accumulate(&mut self, other: &LossRecord) {
        self.l_rgb_rgb += other.l_rgb_rgb;
        self.l_dep_dep += other.l_dep_dep;
        self.l_rgb_dep += other.l_rgb_dep;
        self.l_dep_rgb += other.l_dep_rgb;
        self.kl_rgb += other.kl_rgb;
        self.kl_dep += other.kl_dep;
        self.total += other.total;
    }

    fn scale(&mut self, f: f64) {
        for v in [
            &mut self.l_rgb_rgb,
            &mut self.l_dep_dep,
            &mut self.l_rgb_dep,
            &mut self.l_dep_rgb,
            &mut self.kl_rgb,
            &mut self.kl_dep,
            &mut self.total,
        ] {
            *v *= f;
        }
    }
}

/// KL(N(mean, diag(exp(log_var))) || N(0, I)).
pub fn kl_term(mean: &[f64], log_var: &[f64]) -> f64 {
    0.5 * mean.iter().zip(log_var).map(|(m, lv)| lv.exp() + m * m - 1.0 - lv).sum::<f64>()
}

pub fn recon_loss(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::shape(x.len(), x_hat.len()));
    }
    if x.is_empty() {
        return Ok(0.0);
    }
    Ok(mse_with_grad(x, x_hat).0)
}

struct Latent {
    pass: EncoderPass,
    z: Vec<f64>,
}

fn encode_sample(model: &Cvae, p: &ParamStore, domain: Domain, x: &[f64], eps: &[f64]) -> Result<Latent> {
    if eps.len() != model.arch.latent_dim {
        return Err(Error::shape(format!("epsilon of {}", model.arch.latent_dim), eps.len()));
    }
    let pass = model.encoder(domain).forward(p, model.input_tensor(domain, x)?);
    let z = sample_latent(&pass.mean, &pass.log_var, eps);
    Ok(Latent { pass, z })
}

/// Gradient of the encoder outputs from `dz` plus `kl_scale` times the KL gradient.
fn latent_grads(latent: &Latent, eps: &[f64], dz: &[f64], kl_scale: f64) -> (Vec<f64>, Vec<f64>) {
    let (mean, log_var) = (&latent.pass.mean, &latent.pass.log_var);
    let d_mean = (0..mean.len()).map(|i| dz[i] + kl_scale * mean[i]).collect();
    let d_log_var = (0..mean.len())
        .map(|i| {
            let sd = (0.5 * log_var[i]).exp();
            dz[i] * 0.5 * sd * eps[i] + kl_scale * 0.5 * (log_var[i].exp() - 1.0)
        })
        .collect();
    (d_mean, d_log_var)
}

fn sample_loss(
    model: &Cvae,
    p: &ParamStore,
    sample: &Sample,
    eps: &EpsilonDraw,
    kl_weight: f64,
    kl_dedup: bool,
    grads: Option<&mut Gradients>,
) -> Result<LossRecord> {
    let label = model.condition(sample.node)?;
    let rgb = encode_sample(model, p, Domain::Rgb, sample.rgb, &eps.rgb)?;
    let dep = encode_sample(model, p, Domain::Dep, sample.depth, &eps.dep)?;
    let in_rgb = model.decoder_input(&rgb.z, &label)?;
    let in_dep = model.decoder_input(&dep.z, &label)?;

    // (encoder that produced the latent, decoder, target)
    let routes = [
        (Domain::Rgb, Domain::Rgb, sample.rgb),
        (Domain::Dep, Domain::Dep, sample.depth),
        (Domain::Rgb, Domain::Dep, sample.depth),
        (Domain::Dep, Domain::Rgb, sample.rgb),
    ];
    let mut recon = [0.0; 4];
    let mut traces = Vec::with_capacity(4);
    for (k, (source, decoder, target)) in routes.iter().enumerate() {
        let input = if *source == Domain::Rgb { &in_rgb } else { &in_dep };
        let trace = model.decoder(*decoder).net.forward(p, input.clone());
        let (loss, grad) = mse_with_grad(target, &trace.output().data);
        recon[k] = loss;
        traces.push((trace, grad));
    }

    let kl_rgb = kl_term(&rgb.pass.mean, &rgb.pass.log_var);
    let kl_dep = kl_term(&dep.pass.mean, &dep.pass.log_var);
    let kl_uses = if kl_dedup { 1.0 } else { 2.0 };
    let record = LossRecord {
        step: 0,
        l_rgb_rgb: recon[0] + kl_weight * kl_rgb,
        l_dep_dep: recon[1] + kl_weight * kl_dep,
        l_rgb_dep: recon[2] + kl_weight * kl_rgb,
        l_dep_rgb: recon[3] + kl_weight * kl_dep,
        kl_rgb,
        kl_dep,
        total: recon.iter().sum::<f64>() + kl_uses * kl_weight * (kl_rgb + kl_dep),
        kl_weight,
        kl_dedup,
    };

    if let Some(g) = grads {
        let d = model.arch.latent_dim;
        let mut dz_rgb = vec![0.0; d];
        let mut dz_dep = vec![0.0; d];
        for ((trace, grad), (source, decoder, _)) in traces.into_iter().zip(routes) {
            let [c, h, w] = trace.output().shape();
            let d_in = model.decoder(decoder).net.backward(p, &trace, Tensor::new(c, h, w, grad), g);
            let dz = if source == Domain::Rgb { &mut dz_rgb } else { &mut dz_dep };
            for (a, b) in dz.iter_mut().zip(&d_in.data[..d]) {
                *a += b;
            }
        }
        let kl_scale = kl_uses * kl_weight;
        let (dm, dlv) = latent_grads(&rgb, &eps.rgb, &dz_rgb, kl_scale);
        model.enc_rgb.backward(p, &rgb.pass, dm, dlv, g);
        let (dm, dlv) = latent_grads(&dep, &eps.dep, &dz_dep, kl_scale);
        model.enc_dep.backward(p, &dep.pass, dm, dlv, g);
    }
    Ok(record)
}

fn batch_loss(
    model: &Cvae,
    params: &ParamStore,
    batch: &[Sample],
    eps: &[EpsilonDraw],
    kl_weight: f64,
    kl_dedup: bool,
    mut grads: Option<&mut Gradients>,
) -> Result<LossRecord> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if eps.len() != batch.len() {
        return Err(Error::shape(format!("{} epsilon draws", batch.len()), eps.len()));
    }
    let mut total: Option<LossRecord> = None;
    for (sample, e) in batch.iter().zip(eps) {
        let record = sample_loss(model, params, sample, e, kl_weight, kl_dedup, grads.as_deref_mut())?;
        match total.as_mut() {
            Some(t) => t.accumulate(&record),
            None => total = Some(record),
        }
    }
    let mut record = total.expect("non-empty batch");
    let inv = 1.0 / batch.len() as f64;
    record.scale(inv);
    if let Some(g) = grads {
        g.scale(inv);
    }
    Ok(record)
}

/// Joint objective over a batch with explicit noise draws.
pub fn cvae_loss(
    model: &Cvae,
    params: &ParamStore,
    batch: &[Sample],
    eps: &[EpsilonDraw],
    kl_weight: f64,
    kl_dedup: bool,
) -> Result<LossRecord> {
    batch_loss(model, params, batch, eps, kl_weight, kl_dedup, None)
}

/// [`cvae_loss`] plus its gradient with respect to every parameter.
pub fn cvae_loss_and_grad(
    model: &Cvae,
    params: &ParamStore,
    batch: &[Sample],
    eps: &[EpsilonDraw],
    kl_weight: f64,
    kl_dedup: bool,
) -> Result<(LossRecord, Gradients)> {
    let mut grads = params.zero_grads();
    let record = batch_loss(model, params, batch, eps, kl_weight, kl_dedup, Some(&mut grads))?;
    Ok((record, grads))
}

/// Deterministic autoencoder losses `[rgb->rgb, dep->dep, rgb->dep, dep->rgb]`
/// with each encoder reduced to its mean head.
pub fn autoencoder_loss(model: &Cvae, params: &ParamStore, batch: &[Sample]) -> Result<[f64; 4]> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut out = [0.0; 4];
    for sample in batch {
        let label = model.condition(sample.node)?;
        let code = |domain: Domain, x: &[f64]| -> Result<Tensor> {
            let features = model.encoder(domain).trunk.forward(params, model.input_tensor(domain, x)?).into_output();
            model.decoder_input(&model.encoder(domain).mean.forward(params, &features).data, &label)
        };
        let (c_rgb, c_dep) = (code(Domain::Rgb, sample.rgb)?, code(Domain::Dep, sample.depth)?);
        let run = |decoder: Domain, input: &Tensor| model.decoder(decoder).net.forward(params, input.clone()).into_output().data;
        out[0] += recon_loss(sample.rgb, &run(Domain::Rgb, &c_rgb))?;
        out[1] += recon_loss(sample.depth, &run(Domain::Dep, &c_dep))?;
        out[2] += recon_loss(sample.depth, &run(Domain::Dep, &c_rgb))?;
        out[3] += recon_loss(sample.rgb, &run(Domain::Rgb, &c_dep))?;
    }
    for v in &mut out {
        *v /= batch.len() as f64;
    }
    Ok(out)
}

/// One Adam step on the joint objective. Parameters are untouched when the
/// loss or its gradient is not finite.
pub fn train_step(
    model: &Cvae,
    params: &mut ParamStore,
    state: &mut AdamState,
    batch: &[Sample],
    eps: &[EpsilonDraw],
    config: &TrainConfig,
) -> Result<LossRecord> {
    let (mut record, grads) = cvae_loss_and_grad(model, params, batch, eps, config.kl_weight, config.kl_dedup)?;
    record.step = state.t + 1;
    let grads_finite = grads.arrays().iter().all(|a| a.iter().all(|v| v.is_finite()));
    if !record.total.is_finite() || !grads_finite {
        return Err(Error::NonFiniteLoss { step: record.step });
    }
    Adam::new(config.learning_rate).step(params, &grads, state);
    Ok(record)
}
