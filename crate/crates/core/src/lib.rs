//! Dataset distillation in latent space.
//!
//! The crate distills a labeled image dataset into a small synthetic set of
//! latent codes behind a pluggable autoencoder codec. Three matching
//! algorithms are provided (gradient, distribution, and trajectory
//! matching), together with the pixel-space evaluation harness, binary cache
//! formats, and resource metering used by the command-line pipeline.

pub mod augment;
pub mod autodiff;
pub mod codec;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod io;
pub mod networks;
pub mod optim;
pub mod resources;
pub mod toyset;

pub use data::{
    compute_lpc, init_synthetic, latent_shape, Algorithm, BudgetSpec, LatentDataset,
    RealImageDataset, SyntheticLatentSet, SyntheticMeta,
};
pub use error::{Error, Result};
