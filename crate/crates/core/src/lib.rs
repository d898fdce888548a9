//! Test-time adaptation of frozen time-series forecasters.
//!
//! A frozen backbone is wrapped by two gated low-rank calibration modules,
//! one on its input window and one on its forecast. Only the modules are
//! trained online, from partially and then fully observed ground truth.
//!
//! Layout:
//! - [`tensor`], [`autograd`], [`spectral`]: dense arrays, reverse-mode tape, real DFT
//! - [`data`]: CSV loading, chronological splits, normalization, windows
//! - [`forecast`]: OLS, DLinear and MLP backbones plus checkpoints
//! - [`calibration`]: the gated low-rank residual modules
//! - [`losses`]: Huber, spectral and patch-structure objectives
//! - [`optim`]: SGD and Adam
//! - [`tta`]: label calendar, dominant period, the streaming adaptation protocol
//! - [`container`]: checksummed binary files for checkpoints and module snapshots

pub mod autograd;
pub mod calibration;
pub mod container;
pub mod data;
pub mod error;
pub mod forecast;
pub mod gradcheck;
pub mod losses;
pub mod optim;
pub mod spectral;
pub mod tensor;
pub mod tta;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
