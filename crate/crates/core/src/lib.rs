//! Transferable memory for spatiotemporal predictive networks.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense `f64` tensors, convolution, layer norm, space-to-depth.
//! * [`autodiff`]: reverse-mode differentiation over a per-step tape.
//! * [`cells`]: ConvLSTM and Transferable Memory Unit (TMU) cells.
//! * [`network`]: stacked sequence-to-sequence predictors and memory banks.
//! * [`transfer`]: distillation loss and the joint training objective.
//! * [`data`]: procedural video datasets and their file format.
//! * [`metrics`]: MSE, MAE, SSIM and CSI.
//! * [`optim`], [`train`], [`checkpoint`]: Adam, training modes, persistence.

pub mod autodiff;
pub mod cells;
pub mod checkpoint;
mod codec;
pub mod data;
pub mod error;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;
pub mod transfer;

pub use codec::{decode_kv, encode_kv, file_digest, write_atomic};

pub use error::{Error, Result};
pub use tensor::Tensor;
