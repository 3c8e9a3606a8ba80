//! Per-pixel cloud/land/sea classification for hyperspectral imagery:
//! dataset handling, a 1D spectral CNN, gradient-boosted trees, low-rank
//! compression, PCA feature reduction, evaluation metrics, analytic cost
//! modeling, inference benchmarks and downlink decisions.
//!
//! Every classifier variant sits behind [`registry::PixelClassifier`]
//! and is selected at runtime by kind name through
//! [`registry::ModelRegistry`].

pub mod bench;
pub mod cnn;
pub mod compress;
pub mod cost;
pub mod data;
pub mod error;
pub mod eval;
pub mod format;
pub mod gbt;
pub mod io;
pub mod mask;
pub mod numerics;
pub mod reduce;
pub mod registry;

pub use error::{Error, Result};
