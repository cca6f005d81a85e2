//! Suppression of accumulated trivial attention in small vision
//! transformers, built on a small `f64` reverse-mode autodiff engine.
//!
//! Modules, bottom-up:
//!
//! - [`tensor`]: dense tensors, the computation tape, finite-difference checks.
//! - [`sata`]: trivial-weight masks, the suppression transform, its bound
//!   checker, and attention statistics.
//! - [`attention`]: multi-head self-attention with temperature, diagonal
//!   masking, and suppression hooks.
//! - [`vit`]: the transformer backbone, parameter containers, checkpoints.
//! - [`data`]: CIFAR-style binary datasets, synthetic data, augmentation.
//! - [`optim`]: AdamW with separate model and scale parameter groups.
//! - [`experiment`]: training, grid search, evaluation, attention reports.

pub mod attention;
pub mod data;
pub mod error;
pub mod experiment;
mod init;
pub mod optim;
pub mod sata;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
