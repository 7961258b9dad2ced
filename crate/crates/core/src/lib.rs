//! Partial-label learning with amortized variational inference.
//!
//! The crate trains a probabilistic classifier from data where each instance
//! carries a set of candidate labels, exactly one of which is correct. A
//! neural network predicts the parameters of a Dirichlet posterior over the
//! true label; a conditional VAE models the features given a label; a
//! maximum-entropy class prior anchors the posterior; and a candidate-set
//! likelihood ties the posterior to the observed label sets. Everything runs
//! on the CPU in f64 on top of a small reverse-mode autodiff tape.

pub mod config;
pub mod data;
pub mod dist;
pub mod error;
pub mod eval;
pub mod models;
pub mod objective;
pub mod prior;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
