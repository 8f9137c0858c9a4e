//! Minimal 64-bit dense/convolutional network toolkit with manual backprop.

mod adam;
mod layers;
mod params;

pub use adam::{Adam, AdamState};
pub use layers::{Aux, Conv2d, ConvTranspose2d, InstanceNorm, Layer, Linear, Sequential, Tensor, Trace, LEAKY_SLOPE};
pub use params::{Gradients, Init, ParamEntry, ParamId, ParamStore};

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_with_grad(target: &[f64], pred: &[f64]) -> (f64, Vec<f64>) {
    let n = target.len() as f64;
    let mut loss = 0.0;
    let grad = target
        .iter()
        .zip(pred)
        .map(|(t, p)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    (loss / n, grad)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
