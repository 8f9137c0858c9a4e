//! Encoder/decoder stacks and how they are wired into one paired model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvTranspose2d, InstanceNorm, Layer, Linear, ParamStore, Sequential, Tensor, Trace};

pub const DOWN_BLOCKS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Rgb,
    Dep,
}

impl Domain {
    pub fn channels(self) -> usize {
        match self {
            Domain::Rgb => 3,
            Domain::Dep => 1,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Domain::Rgb => "rgb",
            Domain::Dep => "dep",
        }
    }
}

/// What the decoders see in the label slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    /// One-hot node label.
    OneHot,
    /// Every node maps to the same constant vector (1/N in each slot).
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub height: usize,
    pub width: usize,
    pub latent_dim: usize,
    pub num_nodes: usize,
    /// Channel widths after each downsampling block.
    pub channels: [usize; DOWN_BLOCKS],
    pub shared_trunk: bool,
    pub conditioning: Conditioning,
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let factor = 1 << DOWN_BLOCKS;
        if self.height == 0 || self.width == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::Config(format!(
                "raster {}x{} must be a positive multiple of {factor}",
                self.width, self.height
            )));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be >= 1".into()));
        }
        if self.num_nodes == 0 {
            return Err(Error::Config("num_nodes must be >= 1".into()));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("channel widths must be >= 1".into()));
        }
        Ok(())
    }

    pub fn bottleneck(&self) -> (usize, usize) {
        (self.height >> DOWN_BLOCKS, self.width >> DOWN_BLOCKS)
    }

    pub fn bottleneck_features(&self) -> usize {
        let (h, w) = self.bottleneck();
        self.channels[DOWN_BLOCKS - 1] * h * w
    }

    pub fn decoder_input_width(&self) -> usize {
        self.latent_dim + self.num_nodes
    }

    pub fn raster_len(&self, domain: Domain) -> usize {
        domain.channels() * self.height * self.width
    }
}

/// Instance norm over a single pixel maps everything to its bias, so
/// 1x1 activations are left unnormalized.
fn norm(store: &mut ParamStore, name: &str, channels: usize, spatial: usize, rng: &mut impl Rng) -> Option<Layer> {
    (spatial > 1).then(|| Layer::Norm(InstanceNorm::new(store, &format!("{name}.norm"), channels, rng)))
}

fn down_block(store: &mut ParamStore, name: &str, cin: usize, cout: usize, out_spatial: usize, rng: &mut impl Rng) -> Vec<Layer> {
    let mut layers = vec![Layer::Conv(Conv2d::new(store, &format!("{name}.conv"), cin, cout, 4, 2, 1, rng))];
    layers.extend(norm(store, name, cout, out_spatial, rng));
    layers.push(Layer::LeakyRelu);
    layers
}

fn up_block(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Vec<Layer> {
    vec![
        Layer::Deconv(ConvTranspose2d::new(store, &format!("{name}.deconv"), cin, cout, 4, 2, 1, rng)),
        Layer::Norm(InstanceNorm::new(store, &format!("{name}.norm"), cout, rng)),
        Layer::LeakyRelu,
    ]
}

fn residual_block(store: &mut ParamStore, name: &str, channels: usize, spatial: usize, rng: &mut impl Rng) -> Layer {
    let mut layers = vec![Layer::Conv(Conv2d::new(store, &format!("{name}.conv1"), channels, channels, 3, 1, 1, rng))];
    layers.extend(norm(store, name, channels, spatial, rng));
    layers.push(Layer::LeakyRelu);
    layers.push(Layer::Conv(Conv2d::new(store, &format!("{name}.conv2"), channels, channels, 3, 1, 1, rng)));
    Layer::Residual(Sequential::new(layers))
}

/// Pixels per channel after `blocks` halvings.
fn spatial_after(arch: &ArchConfig, blocks: usize) -> usize {
    (arch.height >> blocks) * (arch.width >> blocks)
}

/// Convolutional trunk plus the two affine Gaussian heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub trunk: Sequential,
    pub mean: Linear,
    pub log_var: Linear,
}

pub struct EncoderPass {
    pub trace: Trace,
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl Encoder {
    /// Conv stack ending in two heads. `shared_last` supplies the deepest
    /// downsampling block when it is tied to another encoder.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        arch: &ArchConfig,
        shared_last: Option<&[Layer]>,
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = Vec::new();
        let mut cin = in_channels;
        for (b, &cout) in arch.channels.iter().enumerate() {
            match shared_last {
                Some(shared) if b == DOWN_BLOCKS - 1 => layers.extend(shared.iter().cloned()),
                _ => layers.extend(down_block(store, &format!("{name}.down{b}"), cin, cout, spatial_after(arch, b + 1), rng)),
            }
            cin = cout;
        }
        let c = arch.channels[DOWN_BLOCKS - 1];
        layers.push(residual_block(store, &format!("{name}.res"), c, spatial_after(arch, DOWN_BLOCKS), rng));
        let features = arch.bottleneck_features();
        layers.push(Layer::Reshape([features, 1, 1]));
        let head_std = 0.1 / (features as f64).sqrt();
        let mean = Linear::new(store, &format!("{name}.mean"), features, arch.latent_dim, head_std, rng);
        let log_var = Linear::new(store, &format!("{name}.log_var"), features, arch.latent_dim, head_std, rng);
        Encoder { trunk: Sequential::new(layers), mean, log_var }
    }

    /// Index of the first layer of downsampling block `block`.
    fn block_start(layers: &[Layer], block: usize) -> usize {
        layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Conv(_)))
            .nth(block)
            .map(|(i, _)| i)
            .unwrap_or(layers.len())
    }

    /// The deepest downsampling block (conv, optional norm, activation).
    pub fn last_block(&self) -> &[Layer] {
        let start = Self::block_start(&self.trunk.layers, DOWN_BLOCKS - 1);
        let end = start + self.trunk.layers[start..].iter().position(|l| matches!(l, Layer::LeakyRelu)).unwrap() + 1;
        &self.trunk.layers[start..end]
    }

    pub fn forward(&self, p: &ParamStore, x: Tensor) -> EncoderPass {
        let trace = self.trunk.forward(p, x);
        let mean = self.mean.forward(p, trace.output()).data;
        let log_var = self.log_var.forward(p, trace.output()).data;
        EncoderPass { trace, mean, log_var }
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        pass: &EncoderPass,
        d_mean: Vec<f64>,
        d_log_var: Vec<f64>,
        g: &mut crate::nn::Gradients,
    ) {
        let features = pass.trace.output();
        let mut d_feat = self.mean.backward(p, features, &Tensor::vector(d_mean), g);
        let d2 = self.log_var.backward(p, features, &Tensor::vector(d_log_var), g);
        for (a, b) in d_feat.data.iter_mut().zip(&d2.data) {
            *a += b;
        }
        self.trunk.backward(p, &pass.trace, d_feat, g);
    }
}

/// Affine lift of `[z, label]` followed by a deconvolution stack and a sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub net: Sequential,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, name: &str, out_channels: usize, arch: &ArchConfig, rng: &mut impl Rng) -> Self {
        let (bh, bw) = arch.bottleneck();
        let c = arch.channels;
        let mut layers = vec![
            Layer::Linear(Linear::he(store, &format!("{name}.lift"), arch.decoder_input_width(), arch.bottleneck_features(), rng)),
            Layer::LeakyRelu,
            Layer::Reshape([c[DOWN_BLOCKS - 1], bh, bw]),
            residual_block(store, &format!("{name}.res"), c[DOWN_BLOCKS - 1], bh * bw, rng),
        ];
        for b in (1..DOWN_BLOCKS).rev() {
            layers.extend(up_block(store, &format!("{name}.up{}", DOWN_BLOCKS - 1 - b), c[b], c[b - 1], rng));
        }
        layers.push(Layer::Deconv(ConvTranspose2d::new(store, &format!("{name}.out"), c[0], out_channels, 4, 2, 1, rng)));
        layers.push(Layer::Sigmoid);
        Decoder { net: Sequential::new(layers) }
    }
}

/// The paired model: E_rgb, E_dep, G_rgb, G_dep.
#[derive(Clone, Debug, PartialEq)]
pub struct Cvae {
    pub arch: ArchConfig,
    pub enc_rgb: Encoder,
    pub enc_dep: Encoder,
    pub dec_rgb: Decoder,
    pub dec_dep: Decoder,
}

impl Cvae {
    /// Builds the layer graph and freshly initialized parameters.
    pub fn new(arch: ArchConfig, rng: &mut impl Rng) -> Result<(Self, ParamStore)> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let shared = if arch.shared_trunk {
            let cin = arch.channels[DOWN_BLOCKS - 2];
            let cout = arch.channels[DOWN_BLOCKS - 1];
            let spatial = spatial_after(&arch, DOWN_BLOCKS);
            Some(down_block(&mut store, &format!("shared.down{}", DOWN_BLOCKS - 1), cin, cout, spatial, rng))
        } else {
            None
        };
        let enc_rgb = Encoder::new(&mut store, "enc_rgb", 3, &arch, shared.as_deref(), rng);
        let enc_dep = Encoder::new(&mut store, "enc_dep", 1, &arch, shared.as_deref(), rng);
        let dec_rgb = Decoder::new(&mut store, "dec_rgb", 3, &arch, rng);
        let dec_dep = Decoder::new(&mut store, "dec_dep", 1, &arch, rng);
        Ok((Cvae { arch, enc_rgb, enc_dep, dec_rgb, dec_dep }, store))
    }

    pub fn encoder(&self, domain: Domain) -> &Encoder {
        match domain {
            Domain::Rgb => &self.enc_rgb,
            Domain::Dep => &self.enc_dep,
        }
    }

    pub fn decoder(&self, domain: Domain) -> &Decoder {
        match domain {
            Domain::Rgb => &self.dec_rgb,
            Domain::Dep => &self.dec_dep,
        }
    }

    pub fn input_tensor(&self, domain: Domain, x: &[f64]) -> Result<Tensor> {
        let want = self.arch.raster_len(domain);
        if x.len() != want {
            return Err(Error::shape(
                format!("{} raster of {want} values", domain.tag()),
                format!("{} values", x.len()),
            ));
        }
        Ok(Tensor::new(domain.channels(), self.arch.height, self.arch.width, x.to_vec()))
    }

    /// Label vector for `node` under the configured conditioning.
    pub fn condition(&self, node: usize) -> Result<Vec<f64>> {
        let n = self.arch.num_nodes;
        match self.arch.conditioning {
            Conditioning::OneHot => Ok(crate::topomap::one_hot(node, n)?.as_slice().to_vec()),
            Conditioning::Constant => {
                if node >= n {
                    return Err(Error::IndexOutOfRange { index: node, len: n });
                }
                Ok(vec![1.0 / n as f64; n])
            }
        }
    }

    /// Decoder input `[z, label]`; the label occupies the last N slots.
    pub fn decoder_input(&self, z: &[f64], label: &[f64]) -> Result<Tensor> {
        if z.len() != self.arch.latent_dim {
            return Err(Error::shape(format!("latent of {}", self.arch.latent_dim), z.len()));
        }
        if label.len() != self.arch.num_nodes {
            return Err(Error::shape(format!("label of {} nodes", self.arch.num_nodes), label.len()));
        }
        let mut v = Vec::with_capacity(self.arch.decoder_input_width());
        v.extend_from_slice(z);
        v.extend_from_slice(label);
        Ok(Tensor::vector(v))
    }
}
