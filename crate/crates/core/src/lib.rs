//! Uncertainty-aware low-rank adaptation for binary pair-interaction
//! classification.
//!
//! A small frozen transformer encoder is fine-tuned through LoRA adapters on
//! its query, value and output projections. On top of the single fine-tuned
//! model the crate provides LoRA ensembles and a post-hoc Laplace
//! approximation over the adapter weights (K-FAC Fisher, linearized Gaussian
//! predictive), plus the evaluation suite used to compare them.

pub mod data;
pub mod ensemble;
pub mod error;
mod fsio;
pub mod harness;
pub mod laplace;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod predict;
pub mod train;

pub use error::{Error, Result};
