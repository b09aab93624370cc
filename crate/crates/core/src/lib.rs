//! Exploratory sampling: decoding that reweights a frozen language model's
//! logits by the prediction error of an online-trained latent distiller.

pub mod backbone;
pub mod bench;
pub mod distiller;
pub mod engine;
pub mod experiment;
pub mod metrics;
pub mod numerics;
pub mod sampler;
pub mod tensorfile;
pub mod verify;
