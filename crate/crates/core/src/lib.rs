//! Structured visual attention over binary grid CRFs.
//!
//! Mean-field and loopy belief propagation are unfolded into differentiable
//! layers on a small reverse-mode tape, driven by question-conditioned
//! potentials, and trained end to end on a synthetic shapes dataset.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod crf;
pub mod erf;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod kv;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod shapes;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
