//! Infinite mixtures of variational autoencoders trained by blocked Gibbs
//! sampling, and a mixture-of-experts classifier gated by the mixture.
//!
//! The crate is self-contained: tensors, a small reverse-mode autodiff tape,
//! layers and optimizers live in [`tensor`], [`autodiff`], [`nn`] and
//! [`optim`]; the models are in [`vae`], [`mixture`] and [`moe`]; file
//! formats and datasets are in [`data`].

pub mod autodiff;
pub mod data;
pub mod error;
pub mod mixture;
pub mod moe;
pub mod nn;
pub mod optim;
pub mod persist;
pub mod rng;
pub mod tensor;
pub mod vae;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::Tensor;
