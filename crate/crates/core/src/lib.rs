//! EWasteNet: a two-stream image classifier built on a small, self-contained
//! reverse-mode autodiff engine.
//!
//! The edge stream runs a frozen Sobel operator, a learned 3×3 adapter and a
//! DeiT-style transformer. The pyramid stream runs dilated convolutions
//! (ASPP), a CBAM attention block, another adapter and a second transformer.
//! The two class-token features are concatenated and classified by an MLP.
//!
//! Module map:
//! - [`tensor`]: dense tensors, autodiff, finite-difference checker
//! - [`data`]: dataset scanning, image decoding, resizing, augmentation, splits
//! - [`deit`]: the transformer backbone
//! - [`model`]: the full two-stream network
//! - [`train`]: Adam, the training loop and checkpoints
//! - [`eval`]: confusion matrix, metrics, ROC and report rendering
//! - [`config`]: the JSON run configuration consumed by the CLI

pub mod check;
pub mod config;
pub mod data;
pub mod deit;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
