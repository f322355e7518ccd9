//! Desk-scale end-to-end detection transformer with denoising anchor
//! queries, buildable and testable on a laptop.
//!
//! The crate is organized around a minimal f64 autodiff engine ([`tensor`])
//! and the detector pieces on top of it: box geometry, contrastive
//! denoising query generation, bipartite matching and losses, the
//! encoder/decoder network itself, evaluation metrics, test-time
//! augmentation fusion, and the training harness.

pub mod boxes;
pub mod config;
pub mod data;
pub mod denoise;
pub mod ensemble;
pub mod error;
pub mod hungarian;
pub mod loss;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};

pub mod metrics;
pub mod model;
