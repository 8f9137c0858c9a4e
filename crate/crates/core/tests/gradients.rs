mod common;

use common::{finite_difference_check, jitter_params, FD_REL_TOL};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use topodepth::cvae::{cvae_loss, cvae_loss_and_grad, draw_epsilon, ArchConfig, Conditioning, Cvae, Sample};

fn miniature(shared_trunk: bool) -> ArchConfig {
    ArchConfig {
        height: 8,
        width: 8,
        latent_dim: 4,
        num_nodes: 2,
        channels: [2, 3, 4],
        shared_trunk,
        conditioning: Conditioning::OneHot,
    }
}

fn batch_data(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    use rand::Rng;
    let rgb = (0..2).map(|_| (0..192).map(|_| rng.gen::<f64>()).collect()).collect();
    let dep = (0..2).map(|_| (0..64).map(|_| rng.gen_range(0.05..0.9)).collect()).collect();
    (rgb, dep)
}

fn check(shared_trunk: bool, kl_dedup: bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (model, mut params) = Cvae::new(miniature(shared_trunk), &mut rng).unwrap();
    jitter_params(&mut params, 0.2, &mut rng);
    let (rgb, dep) = batch_data(&mut rng);
    let batch: Vec<Sample> = (0..2).map(|k| Sample { rgb: &rgb[k], depth: &dep[k], node: k }).collect();
    let eps = draw_epsilon(&mut rng, 2, 4);
    let (_, grads) = cvae_loss_and_grad(&model, &params, &batch, &eps, 0.5, kl_dedup).unwrap();
    let report = finite_difference_check(&params, &grads, |p| cvae_loss(&model, p, &batch, &eps, 0.5, kl_dedup).unwrap().total);
    assert_eq!(report.checked, params.num_scalars());
    assert!(report.worst < FD_REL_TOL, "worst relative error {:e} at {}", report.worst, report.worst_at);
}

#[test]
fn cvae_gradients_match_central_differences() {
    check(false, false);
}

#[test]
fn shared_trunk_and_dedup_gradients_match() {
    check(true, true);
}

#[test]
fn classifier_gradients_match_central_differences() {
    use topodepth::classifier::{cross_entropy_and_grad, cross_entropy_loss, ClassifierArch, TopoClassifier};
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let arch = ClassifierArch { height: 8, width: 8, channels: [2, 3, 4], num_nodes: 2 };
    let (model, mut params) = TopoClassifier::new(arch, &mut rng).unwrap();
    jitter_params(&mut params, 0.2, &mut rng);
    let (rgb, _) = batch_data(&mut rng);
    let batch: Vec<(&[f64], usize)> = vec![(&rgb[0], 0), (&rgb[1], 1)];
    let (_, grads) = cross_entropy_and_grad(&model, &params, &batch).unwrap();
    let report = finite_difference_check(&params, &grads, |p| cross_entropy_loss(&model, p, &batch).unwrap());
    assert!(report.worst < FD_REL_TOL, "worst relative error {:e} at {}", report.worst, report.worst_at);
}
