//! Semi-supervised InfoGAN: adversarial training with mutual-information
//! terms that tie a subset of latent codes to sparse labels.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod infotheory;
pub mod latent;
pub mod nets;
pub mod objectives;
pub mod trainer;

pub use infogan_nn::flush_denormals;
