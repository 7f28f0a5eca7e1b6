//! Unsupervised perceptual grouping with a spatial mixture model whose
//! per-pixel weights (object shapes) come from a truncated stick-breaking
//! construction over network outputs, and whose components (object
//! appearances) come from latent object representations. The T-step EM inner
//! loop is unrolled on a differentiation tape and the networks are trained by
//! backpropagation through time.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod em;
pub mod error;
pub mod metrics;
pub mod mixture;
pub mod nets;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::LdpError;
pub use tensor::{Tape, Tensor, Var};
