//! Convolutional building blocks with explicit forward traces and backward passes.
//!
//! Every layer reads its weights from a [`ParamStore`] by [`ParamId`], so two
//! networks can share a block simply by holding the same ids. Backward passes
//! always accumulate into the gradient buffers.

use super::{Gradients, Init, ParamId, ParamStore};
use rand::Rng;

pub const LEAKY_SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-5;

/// Channel-major activation of shape (channels, height, width).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Tensor { c, h, w, data }
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { c: data.len(), h: 1, w: 1, data }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.c, self.h, self.w]
    }

    fn zeros_like(&self) -> Self {
        Tensor::zeros(self.c, self.h, self.w)
    }
}

/// Range of small-side indices `j` whose large-side partner `j*s + k - p` is in `[0, large)`.
fn span(small: usize, large: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if large + pad > k { (large + pad - k).div_ceil(stride).min(small) } else { 0 };
    (lo, hi.max(lo))
}

/// Kernel geometry shared by convolution and its transpose. The "small"
/// raster is the conv output / deconv input; the "large" raster is the conv
/// input / deconv output, indexed as `small * stride + k - pad`.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Geometry {
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn taps(&self) -> usize {
        self.k * self.k
    }

    /// Column matrix `[channels * k * k, sh * sw]` of `large`; row
    /// `(c, ky, kx)` holds the large-side value each small pixel sees through
    /// that tap (zero where it falls in the padding).
    fn im2col(&self, large: &[f64], channels: usize, lh: usize, lw: usize, sh: usize, sw: usize) -> Vec<f64> {
        let (k, s, p) = (self.k, self.stride, self.pad);
        let (lp, sp) = (lh * lw, sh * sw);
        let mut col = vec![0.0; channels * k * k * sp];
        for c in 0..channels {
            let plane = &large[c * lp..(c + 1) * lp];
            for ky in 0..k {
                let (y0, y1) = span(sh, lh, s, p, ky);
                for kx in 0..k {
                    let (x0, x1) = span(sw, lw, s, p, kx);
                    let row = &mut col[((c * k + ky) * k + kx) * sp..][..sp];
                    for sy in y0..y1 {
                        let lrow = &plane[(sy * s + ky - p) * lw..][..lw];
                        let srow = &mut row[sy * sw..(sy + 1) * sw];
                        for sx in x0..x1 {
                            srow[sx] = lrow[sx * s + kx - p];
                        }
                    }
                }
            }
        }
        col
    }

    /// Adjoint of [`Geometry::im2col`]: accumulates column rows back into `large`.
    fn col2im(&self, col: &[f64], channels: usize, lh: usize, lw: usize, sh: usize, sw: usize, large: &mut [f64]) {
        let (k, s, p) = (self.k, self.stride, self.pad);
        let (lp, sp) = (lh * lw, sh * sw);
        for c in 0..channels {
            let plane = &mut large[c * lp..(c + 1) * lp];
            for ky in 0..k {
                let (y0, y1) = span(sh, lh, s, p, ky);
                for kx in 0..k {
                    let (x0, x1) = span(sw, lw, s, p, kx);
                    let row = &col[((c * k + ky) * k + kx) * sp..][..sp];
                    for sy in y0..y1 {
                        let lrow = &mut plane[(sy * s + ky - p) * lw..][..lw];
                        let srow = &row[sy * sw..(sy + 1) * sw];
                        for sx in x0..x1 {
                            lrow[sx * s + kx - p] += srow[sx];
                        }
                    }
                }
            }
        }
    }
}

/// `out[i, :] += sum_j a[i, j] * b[j, :]` for row-major `a` (m x n) and `b` (n x len).
fn matmul_acc(a: &[f64], m: usize, n: usize, b: &[f64], len: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * len..(i + 1) * len];
        for j in 0..n {
            let v = a[i * n + j];
            if v == 0.0 {
                continue;
            }
            for (o, x) in orow.iter_mut().zip(&b[j * len..(j + 1) * len]) {
                *o += v * x;
            }
        }
    }
}

/// `out[j, :] += sum_i a[i, j] * b[i, :]`, i.e. `a` transposed times `b`.
fn matmul_t_acc(a: &[f64], m: usize, n: usize, b: &[f64], len: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * len..(i + 1) * len];
        for j in 0..n {
            let v = a[i * n + j];
            if v == 0.0 {
                continue;
            }
            for (o, x) in out[j * len..(j + 1) * len].iter_mut().zip(brow) {
                *o += v * x;
            }
        }
    }
}

/// `out[i, j] += dot(a[i, :], b[j, :])` for `a` (m x len) and `b` (n x len).
fn outer_dots_acc(a: &[f64], m: usize, b: &[f64], n: usize, len: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * len..(i + 1) * len];
        for j in 0..n {
            out[i * n + j] += arow.iter().zip(&b[j * len..(j + 1) * len]).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// 2-D cross-correlation; weights `[out, in, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    geom: Geometry,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (in_channels * k * k) as f64;
        let weight = store.add(format!("{name}.weight"), &[out_channels, in_channels, k, k], Init::Normal((2.0 / fan_in).sqrt()), rng);
        let bias = store.add(format!("{name}.bias"), &[out_channels], Init::Zeros, rng);
        Conv2d { weight, bias, in_channels, out_channels, geom: Geometry { k, stride, pad } }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let g = self.geom;
        ((h + 2 * g.pad - g.k) / g.stride + 1, (w + 2 * g.pad - g.k) / g.stride + 1)
    }

    fn forward(&self, p: &ParamStore, x: &Tensor) -> Tensor {
        let (oh, ow) = self.output_size(x.h, x.w);
        let (w, b) = (p.get(self.weight), p.get(self.bias));
        let op = oh * ow;
        let col = self.geom.im2col(&x.data, self.in_channels, x.h, x.w, oh, ow);
        let mut y = Tensor::zeros(self.out_channels, oh, ow);
        for oc in 0..self.out_channels {
            y.data[oc * op..(oc + 1) * op].fill(b[oc]);
        }
        matmul_acc(w, self.out_channels, self.in_channels * self.geom.taps(), &col, op, &mut y.data);
        y
    }

    fn backward(&self, p: &ParamStore, x: &Tensor, dy: &Tensor, g: &mut Gradients) -> Tensor {
        let w = p.get(self.weight);
        let op = dy.h * dy.w;
        let rows = self.in_channels * self.geom.taps();
        {
            let db = g.get_mut(self.bias);
            for oc in 0..self.out_channels {
                db[oc] += dy.data[oc * op..(oc + 1) * op].iter().sum::<f64>();
            }
        }
        let col = self.geom.im2col(&x.data, self.in_channels, x.h, x.w, dy.h, dy.w);
        outer_dots_acc(&dy.data, self.out_channels, &col, rows, op, g.get_mut(self.weight));
        let mut dcol = vec![0.0; rows * op];
        matmul_t_acc(w, self.out_channels, rows, &dy.data, op, &mut dcol);
        let mut dx = x.zeros_like();
        self.geom.col2im(&dcol, self.in_channels, x.h, x.w, dy.h, dy.w, &mut dx.data);
        dx
    }
}

/// Transposed convolution; weights `[in, out, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    geom: Geometry,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        // each output pixel sees about in * (k/stride)^2 taps
        let fan_in = (in_channels * k * k / (stride * stride)).max(1) as f64;
        let weight = store.add(format!("{name}.weight"), &[in_channels, out_channels, k, k], Init::Normal((2.0 / fan_in).sqrt()), rng);
        let bias = store.add(format!("{name}.bias"), &[out_channels], Init::Zeros, rng);
        ConvTranspose2d { weight, bias, in_channels, out_channels, geom: Geometry { k, stride, pad } }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let g = self.geom;
        ((h - 1) * g.stride + g.k - 2 * g.pad, (w - 1) * g.stride + g.k - 2 * g.pad)
    }

    fn forward(&self, p: &ParamStore, x: &Tensor) -> Tensor {
        let (oh, ow) = self.output_size(x.h, x.w);
        let (w, b) = (p.get(self.weight), p.get(self.bias));
        let (ip, op) = (x.h * x.w, oh * ow);
        let rows = self.out_channels * self.geom.taps();
        let mut col = vec![0.0; rows * ip];
        matmul_t_acc(w, self.in_channels, rows, &x.data, ip, &mut col);
        let mut y = Tensor::zeros(self.out_channels, oh, ow);
        for oc in 0..self.out_channels {
            y.data[oc * op..(oc + 1) * op].fill(b[oc]);
        }
        self.geom.col2im(&col, self.out_channels, oh, ow, x.h, x.w, &mut y.data);
        y
    }

    fn backward(&self, p: &ParamStore, x: &Tensor, dy: &Tensor, g: &mut Gradients) -> Tensor {
        let w = p.get(self.weight);
        let (ip, op) = (x.h * x.w, dy.h * dy.w);
        let rows = self.out_channels * self.geom.taps();
        {
            let db = g.get_mut(self.bias);
            for oc in 0..self.out_channels {
                db[oc] += dy.data[oc * op..(oc + 1) * op].iter().sum::<f64>();
            }
        }
        let dcol = self.geom.im2col(&dy.data, self.out_channels, dy.h, dy.w, x.h, x.w);
        outer_dots_acc(&x.data, self.in_channels, &dcol, rows, ip, g.get_mut(self.weight));
        let mut dx = x.zeros_like();
        matmul_acc(w, self.in_channels, rows, &dcol, ip, &mut dx.data);
        dx
    }
}

/// Per-channel normalization over the spatial extent with a learned affine.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

impl InstanceNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let gamma = store.add(format!("{name}.gamma"), &[channels], Init::Constant(1.0), rng);
        let beta = store.add(format!("{name}.beta"), &[channels], Init::Zeros, rng);
        InstanceNorm { gamma, beta, channels }
    }

    fn forward(&self, p: &ParamStore, x: &Tensor) -> (Tensor, Aux) {
        let n = x.h * x.w;
        let (gamma, beta) = (p.get(self.gamma), p.get(self.beta));
        let mut y = x.zeros_like();
        let mut xhat = vec![0.0; x.data.len()];
        let mut inv_std = vec![0.0; x.c];
        for c in 0..x.c {
            let xs = &x.data[c * n..(c + 1) * n];
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[c] = is;
            for i in 0..n {
                let h = (xs[i] - mean) * is;
                xhat[c * n + i] = h;
                y.data[c * n + i] = gamma[c] * h + beta[c];
            }
        }
        (y, Aux::Norm { xhat, inv_std })
    }

    fn backward(&self, p: &ParamStore, aux: &Aux, dy: &Tensor, g: &mut Gradients) -> Tensor {
        let Aux::Norm { xhat, inv_std } = aux else { unreachable!("norm trace") };
        let n = dy.h * dy.w;
        let gamma = p.get(self.gamma);
        let mut dx = dy.zeros_like();
        let mut dgamma = vec![0.0; dy.c];
        let mut dbeta = vec![0.0; dy.c];
        for c in 0..dy.c {
            let d = &dy.data[c * n..(c + 1) * n];
            let h = &xhat[c * n..(c + 1) * n];
            let mut sum_d = 0.0;
            let mut sum_dh = 0.0;
            for i in 0..n {
                sum_d += d[i];
                sum_dh += d[i] * h[i];
            }
            dgamma[c] = sum_dh;
            dbeta[c] = sum_d;
            // dx = gamma * inv_std / n * (n * dy - sum(dy) - xhat * sum(dy * xhat))
            let scale = gamma[c] * inv_std[c] / n as f64;
            for i in 0..n {
                dx.data[c * n + i] = scale * (n as f64 * d[i] - sum_d - h[i] * sum_dh);
            }
        }
        for (a, b) in g.get_mut(self.gamma).iter_mut().zip(&dgamma) {
            *a += b;
        }
        for (a, b) in g.get_mut(self.beta).iter_mut().zip(&dbeta) {
            *a += b;
        }
        dx
    }
}

/// Fully connected map over the flattened input; weights `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_features: usize, out_features: usize, std: f64, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), &[out_features, in_features], Init::Normal(std), rng);
        let bias = store.add(format!("{name}.bias"), &[out_features], Init::Zeros, rng);
        Linear { weight, bias, in_features, out_features }
    }

    pub fn he(store: &mut ParamStore, name: &str, in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        Self::new(store, name, in_features, out_features, (2.0 / in_features as f64).sqrt(), rng)
    }

    pub fn forward(&self, p: &ParamStore, x: &Tensor) -> Tensor {
        let (w, b) = (p.get(self.weight), p.get(self.bias));
        let out = (0..self.out_features)
            .map(|o| {
                let row = &w[o * self.in_features..(o + 1) * self.in_features];
                b[o] + row.iter().zip(&x.data).map(|(a, v)| a * v).sum::<f64>()
            })
            .collect();
        Tensor::vector(out)
    }

    pub fn backward(&self, p: &ParamStore, x: &Tensor, dy: &Tensor, g: &mut Gradients) -> Tensor {
        let w = p.get(self.weight);
        let mut dx = vec![0.0; self.in_features];
        for o in 0..self.out_features {
            let d = dy.data[o];
            if d == 0.0 {
                continue;
            }
            let row = &w[o * self.in_features..(o + 1) * self.in_features];
            for (a, r) in dx.iter_mut().zip(row) {
                *a += d * r;
            }
        }
        {
            let dw = g.get_mut(self.weight);
            for o in 0..self.out_features {
                let d = dy.data[o];
                let row = &mut dw[o * self.in_features..(o + 1) * self.in_features];
                for (a, v) in row.iter_mut().zip(&x.data) {
                    *a += d * v;
                }
            }
        }
        for (a, d) in g.get_mut(self.bias).iter_mut().zip(&dy.data) {
            *a += d;
        }
        Tensor::new(x.c, x.h, x.w, dx)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    Deconv(ConvTranspose2d),
    Norm(InstanceNorm),
    LeakyRelu,
    Sigmoid,
    Linear(Linear),
    /// Reinterprets the flat input as (c, h, w).
    Reshape([usize; 3]),
    /// `x + body(x)`.
    Residual(Sequential),
}

/// Per-layer saved state beyond the layer input.
#[derive(Clone, Debug)]
pub enum Aux {
    None,
    Norm { xhat: Vec<f64>, inv_std: Vec<f64> },
    Residual(Box<Trace>),
}

/// Everything a backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    inputs: Vec<Tensor>,
    aux: Vec<Aux>,
    output: Tensor,
}

impl Trace {
    pub fn output(&self) -> &Tensor {
        &self.output
    }

    pub fn into_output(self) -> Tensor {
        self.output
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential { layers }
    }

    pub fn push(&mut self, layer: Layer) {
        self.layers.push(layer);
    }

    pub fn forward(&self, p: &ParamStore, x: Tensor) -> Trace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut aux = Vec::with_capacity(self.layers.len());
        let mut cur = x;
        for layer in &self.layers {
            let (next, a) = match layer {
                Layer::Conv(l) => (l.forward(p, &cur), Aux::None),
                Layer::Deconv(l) => (l.forward(p, &cur), Aux::None),
                Layer::Norm(l) => l.forward(p, &cur),
                Layer::LeakyRelu => {
                    let data = cur.data.iter().map(|&v| if v > 0.0 { v } else { LEAKY_SLOPE * v }).collect();
                    (Tensor::new(cur.c, cur.h, cur.w, data), Aux::None)
                }
                Layer::Sigmoid => {
                    let data = cur.data.iter().map(|&v| sigmoid(v)).collect();
                    (Tensor::new(cur.c, cur.h, cur.w, data), Aux::None)
                }
                Layer::Linear(l) => (l.forward(p, &cur), Aux::None),
                Layer::Reshape([c, h, w]) => (Tensor::new(*c, *h, *w, cur.data.clone()), Aux::None),
                Layer::Residual(body) => {
                    let inner = body.forward(p, cur.clone());
                    let data = cur.data.iter().zip(&inner.output.data).map(|(a, b)| a + b).collect();
                    (Tensor::new(cur.c, cur.h, cur.w, data), Aux::Residual(Box::new(inner)))
                }
            };
            inputs.push(cur);
            aux.push(a);
            cur = next;
        }
        Trace { inputs, aux, output: cur }
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the input.
    pub fn backward(&self, p: &ParamStore, trace: &Trace, dy: Tensor, g: &mut Gradients) -> Tensor {
        let mut grad = dy;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &trace.inputs[i];
            let y = if i + 1 < self.layers.len() { &trace.inputs[i + 1] } else { &trace.output };
            grad = match layer {
                Layer::Conv(l) => l.backward(p, x, &grad, g),
                Layer::Deconv(l) => l.backward(p, x, &grad, g),
                Layer::Norm(l) => l.backward(p, &trace.aux[i], &grad, g),
                Layer::LeakyRelu => {
                    let data = x.data.iter().zip(&grad.data).map(|(&v, &d)| if v > 0.0 { d } else { LEAKY_SLOPE * d }).collect();
                    Tensor::new(x.c, x.h, x.w, data)
                }
                Layer::Sigmoid => {
                    let data = y.data.iter().zip(&grad.data).map(|(&s, &d)| d * s * (1.0 - s)).collect();
                    Tensor::new(x.c, x.h, x.w, data)
                }
                Layer::Linear(l) => l.backward(p, x, &grad, g),
                Layer::Reshape(_) => Tensor::new(x.c, x.h, x.w, grad.data),
                Layer::Residual(body) => {
                    let Aux::Residual(inner) = &trace.aux[i] else { unreachable!("residual trace") };
                    let through = body.backward(p, inner, grad.clone(), g);
                    let data = grad.data.iter().zip(&through.data).map(|(a, b)| a + b).collect();
                    Tensor::new(x.c, x.h, x.w, data)
                }
            };
        }
        grad
    }
}
