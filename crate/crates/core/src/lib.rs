//! A self-contained laboratory for semi-supervised multi-view crowd
//! counting by model ranking.
//!
//! The crate synthesizes multi-view ground-plane crowd scenes, trains a
//! small multi-view fusion counting network with prediction-ranking and
//! uncertainty-ranking losses on partially labeled data, and evaluates
//! counting metrics, all on CPU with a built-in reverse-mode autodiff
//! engine.

pub mod config;
pub mod container;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod scene;
pub mod sweep;
pub mod tape;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape};
pub use tensor::Tensor;
