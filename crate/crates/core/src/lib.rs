//! SALAD: logical anomaly detection over object composition maps.
//!
//! The pipeline combines three branches. A local appearance branch scores
//! texture-level defects, a discriminative composition branch scores
//! violations of the object composition (trained on synthetic anomalies
//! simulated directly on composition maps), and a class-conditional global
//! branch scores per-component feature statistics with Mahalanobis
//! distances. Branch scores are z-normalized with validation statistics and
//! summed into the final anomaly score.
//!
//! Composition maps themselves are produced without labels: features from a
//! pluggable perception backend are clustered, the clusters classify mask
//! proposals into pseudo-labels, and a segmentation network distilled from
//! those pseudo-labels predicts the final maps.
//!
//! Everything runs at desk scale with deterministic stub backends; real
//! backbone outputs can be supplied as precomputed per-image assets.

#![allow(clippy::needless_range_loop)]

pub mod appearance;
pub mod backends;
pub mod cluster;
pub mod compgen;
pub mod compmap;
pub mod composition;
pub mod dataset;
pub mod error;
pub mod global;
pub mod imaging;
pub mod losses;
pub mod nn;
pub mod par;
pub mod perlin;
pub mod pipeline;
pub mod scoring;
pub mod segmenter;
pub mod simulate;
pub mod toy;

pub use error::{Error, Result};

/// Pipeline working resolution. All images are resized to this size on load
/// and every composition / anomaly map at the pipeline boundary is this size.
pub const WORKING_RES: usize = 256;

/// Version string recorded in caches, checkpoints and stage manifests.
pub const PIPELINE_VERSION: &str = env!("CARGO_PKG_VERSION");
