//! Paired conditional VAE over RGB and depth with a shared latent space.
//!
//! Both encoders map into the same Gaussian latent; both decoders read
//! `[z, label]`. Training minimizes the sum of two within-domain and two
//! cross-domain VAE losses. Depth is inferred from RGB by decoding the RGB
//! posterior mean through the depth decoder.

mod arch;
mod loss;

pub use arch::{ArchConfig, Conditioning, Cvae, Decoder, Domain, Encoder, DOWN_BLOCKS};
pub use loss::{
    autoencoder_loss, cvae_loss, cvae_loss_and_grad, draw_epsilon, kl_term, recon_loss, train_step, EpsilonDraw,
    LossRecord, Sample, TrainConfig,
};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::nn::ParamStore;
use crate::preprocess::{denormalize_depth, rgb_from_planes, rgb_planes, NormalizationSpec};
use crate::worldgen::{DepthMap, RgbImage};

/// Posterior mean and log-variance for a normalized raster.
pub fn encode(model: &Cvae, params: &ParamStore, domain: Domain, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let input = model.input_tensor(domain, x)?;
    let pass = model.encoder(domain).forward(params, input);
    Ok((pass.mean, pass.log_var))
}

/// Reparameterized draw `mean + exp(log_var / 2) * eps`.
pub fn sample_latent(mean: &[f64], log_var: &[f64], eps: &[f64]) -> Vec<f64> {
    mean.iter().zip(log_var).zip(eps).map(|((m, lv), e)| m + (0.5 * lv).exp() * e).collect()
}

/// Decodes `[z, label]` into a raster in (0, 1).
pub fn decode(model: &Cvae, params: &ParamStore, domain: Domain, z: &[f64], label: &[f64]) -> Result<Vec<f64>> {
    let input = model.decoder_input(z, label)?;
    Ok(model.decoder(domain).net.forward(params, input).into_output().data)
}

/// RGB frame to depth map for a known node, using the posterior mean.
pub fn infer_depth(
    model: &Cvae,
    params: &ParamStore,
    rgb: &RgbImage,
    node_id: usize,
    spec: &NormalizationSpec,
) -> Result<DepthMap> {
    let label = model.condition(node_id)?;
    let (mean, _) = encode(model, params, Domain::Rgb, &rgb_planes(rgb))?;
    let depth = decode(model, params, Domain::Dep, &mean, &label)?;
    denormalize_depth(model.arch.width, model.arch.height, &depth, spec)
}

/// Decoder outputs for `z ~ N(0, I)` at one node, before denormalization.
pub fn sample_node_normalized(
    model: &Cvae,
    params: &ParamStore,
    node_id: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let label = model.condition(node_id)?;
    let z: Vec<f64> = (0..model.arch.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
    let rgb = decode(model, params, Domain::Rgb, &z, &label)?;
    let depth = decode(model, params, Domain::Dep, &z, &label)?;
    Ok((rgb, depth))
}

/// Hallucinated RGB/depth pair for a node.
pub fn sample_node(
    model: &Cvae,
    params: &ParamStore,
    node_id: usize,
    spec: &NormalizationSpec,
    rng: &mut impl Rng,
) -> Result<(RgbImage, DepthMap)> {
    let (rgb, depth) = sample_node_normalized(model, params, node_id, rng)?;
    let (w, h) = (model.arch.width, model.arch.height);
    Ok((rgb_from_planes(w, h, &rgb)?, denormalize_depth(w, h, &depth, spec)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::rng;

    pub(crate) fn tiny_arch(conditioning: Conditioning) -> ArchConfig {
        ArchConfig {
            height: 8,
            width: 8,
            latent_dim: 4,
            num_nodes: 2,
            channels: [2, 3, 4],
            shared_trunk: false,
            conditioning,
        }
    }

    fn tiny() -> (Cvae, ParamStore) {
        Cvae::new(tiny_arch(Conditioning::OneHot), &mut rng::stream(1, rng::WEIGHT_INIT, 0)).unwrap()
    }

    fn zero_heads(model: &Cvae, params: &mut ParamStore, domain: Domain) {
        let enc = model.encoder(domain);
        for id in [enc.mean.weight, enc.mean.bias, enc.log_var.weight, enc.log_var.bias] {
            params.get_mut(id).fill(0.0);
        }
    }

    #[test]
    fn zero_heads_give_standard_posterior() {
        let (model, mut params) = tiny();
        zero_heads(&model, &mut params, Domain::Rgb);
        let x: Vec<f64> = (0..192).map(|i| (i % 7) as f64 / 7.0).collect();
        let (m, lv) = encode(&model, &params, Domain::Rgb, &x).unwrap();
        assert_eq!(m, vec![0.0; 4]);
        assert_eq!(lv, vec![0.0; 4]);
    }

    #[test]
    fn encode_is_pure_and_checks_shape() {
        let (model, params) = tiny();
        let x = vec![0.5; 64];
        assert_eq!(
            encode(&model, &params, Domain::Dep, &x).unwrap(),
            encode(&model, &params, Domain::Dep, &x).unwrap()
        );
        assert!(matches!(encode(&model, &params, Domain::Dep, &[0.5; 63]), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(encode(&model, &params, Domain::Rgb, &x), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn reparameterization_cases() {
        let mean = [0.5, -1.0];
        assert_eq!(sample_latent(&mean, &[0.3, -2.0], &[0.0, 0.0]), mean.to_vec());
        assert_eq!(sample_latent(&mean, &[0.0, 0.0], &[1.0, 0.0]), vec![1.5, -1.0]);
        let lv = 2.0 * 3f64.ln();
        let z = sample_latent(&mean, &[lv, lv], &[1.0, 1.0]);
        assert!((z[0] - 3.5).abs() < 1e-12 && (z[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn decode_range_purity_and_shape() {
        let (model, params) = tiny();
        let z = [0.3, -0.2, 1.0, 0.0];
        let a = decode(&model, &params, Domain::Dep, &z, &[1.0, 0.0]).unwrap();
        assert_eq!(a.len(), 64);
        assert!(a.iter().all(|v| *v > 0.0 && *v < 1.0));
        assert_eq!(a, decode(&model, &params, Domain::Dep, &z, &[1.0, 0.0]).unwrap());
        assert!(matches!(decode(&model, &params, Domain::Dep, &z, &[1.0, 0.0, 0.0]), Err(Error::ShapeMismatch { .. })));
        assert_eq!(decode(&model, &params, Domain::Rgb, &z, &[0.0, 1.0]).unwrap().len(), 192);
    }

    #[test]
    fn decoder_width_is_latent_plus_nodes() {
        let (model, _) = tiny();
        assert_eq!(model.arch.decoder_input_width(), 6);
        let input = model.decoder_input(&[1.0, 2.0, 3.0, 4.0], &[0.0, 1.0]).unwrap();
        assert_eq!(&input.data[4..], &[0.0, 1.0]);
        for dec in [&model.dec_rgb, &model.dec_dep] {
            let crate::nn::Layer::Linear(lift) = &dec.net.layers[0] else { panic!("lift layer") };
            assert_eq!(lift.in_features, 6);
        }
    }

    #[test]
    fn shared_trunk_ties_deepest_block() {
        let mut arch = tiny_arch(Conditioning::OneHot);
        arch.shared_trunk = true;
        let (model, params) = Cvae::new(arch, &mut rng::stream(1, rng::WEIGHT_INIT, 0)).unwrap();
        assert_eq!(model.enc_rgb.last_block(), model.enc_dep.last_block());
        assert!(params.find("shared.down2.conv.weight").is_some());
        assert!(params.find("enc_dep.down2.conv.weight").is_none());
        let (separate, _) = tiny();
        assert_ne!(separate.enc_rgb.last_block(), separate.enc_dep.last_block());
    }

    #[test]
    fn constant_conditioning_ignores_node() {
        let (model, _) = Cvae::new(tiny_arch(Conditioning::Constant), &mut rng::stream(1, rng::WEIGHT_INIT, 0)).unwrap();
        assert_eq!(model.condition(0).unwrap(), model.condition(1).unwrap());
        assert!(model.condition(2).is_err());
    }

    #[test]
    fn inference_is_deterministic_and_checks_node() {
        let (model, params) = tiny();
        let rgb = RgbImage::new(8, 8, vec![0.25; 192]).unwrap();
        let spec = NormalizationSpec::new(5.0).unwrap();
        let a = infer_depth(&model, &params, &rgb, 1, &spec).unwrap();
        assert_eq!(a, infer_depth(&model, &params, &rgb, 1, &spec).unwrap());
        assert!(a.depths.iter().all(|d| *d > 0.0 && *d < 5.0));
        assert!(matches!(infer_depth(&model, &params, &rgb, 2, &spec), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn node_sampling_is_seeded_and_bounded() {
        let (model, params) = tiny();
        let a = sample_node_normalized(&model, &params, 0, &mut rng::stream(3, rng::SAMPLING, 0)).unwrap();
        let b = sample_node_normalized(&model, &params, 0, &mut rng::stream(3, rng::SAMPLING, 0)).unwrap();
        assert_eq!(a, b);
        assert!(a.0.iter().chain(&a.1).all(|v| (0.0..=1.0).contains(v)));
    }
}
