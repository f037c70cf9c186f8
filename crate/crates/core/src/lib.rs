//! Self-supervised image denoising by iterative data refinement.

pub mod config;
pub mod dataset;
pub mod error;
pub mod image;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod pilot;
pub mod scheduler;
pub mod tensor;

pub use error::{IdrError, Result};
