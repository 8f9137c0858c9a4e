//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use rand::Rng;
use rand_distr::{Distribution, Normal};
use topodepth::nn::{Gradients, ParamStore};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared on an absolute scale of `FD_REL_TOL * FD_FLOOR`.
pub const FD_FLOOR: f64 = 1e-6;

/// Worst relative error between `analytic` and central differences of `loss`.
pub struct FdReport {
    pub checked: usize,
    pub worst: f64,
    pub worst_at: String,
}

pub fn finite_difference_check(
    params: &ParamStore,
    analytic: &Gradients,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> FdReport {
    let mut probe = params.clone();
    let mut report = FdReport { checked: 0, worst: 0.0, worst_at: String::new() };
    for (k, entry) in params.entries().iter().enumerate() {
        for i in 0..entry.data.len() {
            let original = entry.data[i];
            probe.entries_mut()[k].data[i] = original + FD_STEP;
            let up = loss(&probe);
            probe.entries_mut()[k].data[i] = original - FD_STEP;
            let down = loss(&probe);
            probe.entries_mut()[k].data[i] = original;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.arrays()[k][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            report.checked += 1;
            if rel > report.worst {
                report.worst = rel;
                report.worst_at = format!("{}[{i}] analytic {a:e} numeric {numeric:e}", entry.name);
            }
        }
    }
    report
}

/// Moves every parameter off its structured initialization (unit gains,
/// zero biases) so no activation sits exactly on a kink.
pub fn jitter_params(params: &mut ParamStore, std: f64, rng: &mut impl Rng) {
    let noise = Normal::new(0.0, std).unwrap();
    for entry in params.entries_mut() {
        for v in entry.data.iter_mut() {
            *v += noise.sample(rng);
        }
    }
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
