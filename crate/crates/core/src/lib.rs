//! Location-conditioned monocular depth estimation.
//!
//! A paired conditional VAE maps RGB and depth images into one Gaussian
//! latent space; decoders take the latent code concatenated with a one-hot
//! topological node label. At test time an RGB frame is classified into a
//! node, encoded, and decoded as depth for that node.

pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod cvae;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod rng;
pub mod topomap;
pub mod worldgen;

pub use error::{Error, Result};
