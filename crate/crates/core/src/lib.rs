//! Cross-domain feature extraction for single-cell images.
//!
//! The pipeline trains a two-stage autoencoder on per-cell instance
//! features: an encoder compresses each feature vector to a 50-dim
//! latent code, a feature decoder reconstructs the input vector, and an
//! image decoder reconstructs the cell crop from the reconstructed
//! features. Training minimizes feature MSE plus a structural-similarity
//! image term plus a domain-adaptation penalty that pulls every domain's
//! latent statistics toward an anchor domain. Latent quality is probed
//! with a random forest evaluated across domains.
//!
//! Modules map onto the pipeline stages:
//! - [`datamodel`]: records, label registry, stratified splits
//! - [`synthgen`]: procedural multi-domain cell image generator
//! - [`featio`]: on-disk formats (datasets, checkpoints, forests)
//! - [`network`]: encoder/decoders with explicit forward and backward
//! - [`losses`]: composite objective and its gradients
//! - [`training`]: Adam loop with domain-balanced batches
//! - [`forest`]: random-forest classifier used as the downstream probe
//! - [`evalreport`]: cross-domain evaluation matrices and PCA embeddings

pub mod cli;
pub mod datamodel;
pub mod error;
pub mod evalreport;
pub mod featio;
pub mod forest;
pub mod losses;
pub mod network;
pub mod seeds;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};

/// Floating-point scalar used by the model and losses.
///
/// Training runs in `f32`; `f64` exists for finite-difference gradient
/// verification on reduced configurations.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Real")
    }
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}
