//! Post-training quantization of linear layers with two error-reduction
//! passes: a ridge update that folds activation quantization error into the
//! weights, followed by channel-wise weight quantization that refines
//! rounding directions under a Gaussian output-error proxy and compensates
//! the remaining full-precision weights.

pub mod aqer;
pub mod error;
pub mod linalg;
pub mod moments;
pub mod oracle;
pub mod pipeline;
pub mod quant;
pub mod synth;
pub mod tensor_store;
pub mod verify;
pub mod wqer;

pub use error::{ErqError, Result};
