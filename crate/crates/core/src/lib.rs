//! Sparse mixture-of-adapters (SMoA) for debiasing a frozen transformer
//! encoder, plus the synthetic laboratory used to exercise it.
//!
//! Layout:
//! - [`tensor`]: dense `f64` tensors and reverse-mode autodiff.
//! - [`backbone`] / [`model`]: the encoder classifier and SMoA insertion.
//! - [`smoa`]: sparse top-k gate, sub-adapters, mixture layer.
//! - [`data`]: synthetic biased pair-classification data and filters.
//! - [`training`]: AdamW, linear schedule, multi-dataset loss, protocols.
//! - [`analysis`]: routing statistics and parameter accounting.
//! - [`checkpoint`]: JSON-header + raw `f64` checkpoint files.
//! - [`experiment`]: config-driven end-to-end runs.

pub mod analysis;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod model;
pub mod smoa;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::Model;
