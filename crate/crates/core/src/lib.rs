//! Training-free anomaly detection on attention affinity graphs.
//!
//! Affinity matrices are turned into eigenvalue spectra, compared against a
//! pooled reference built from authentic training images, and the per-layer
//! deviations are fused into a single calibrated score.

pub mod error;
pub mod eval;
pub mod features;
pub mod fsel;
pub mod fusion;
pub mod io;
pub mod pipeline;
pub mod reference;
pub mod spectral;
pub mod synth;
pub mod transport;

pub use error::{Error, Result};
