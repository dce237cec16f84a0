//! Out-of-domain intent detection with adaptively smoothed soft labels for
//! pseudo-OOD samples.
//!
//! The pipeline works over fixed feature vectors:
//!
//! 1. [`data`] loads or synthesizes intent datasets and carves IND/OOD splits.
//! 2. [`oodgen`] builds a pseudo-OOD set (feature mixup, open-domain sampling,
//!    low-density latent sampling, or ingested phrase distortions).
//! 3. [`embedding`] trains an encoder and projection with a supervised
//!    contrastive loss; [`graph`] smooths pseudo-OOD labels over the
//!    resulting embedding graph.
//! 4. [`cotrain`] trains two dropout-diverse heads that teach each other with
//!    soft targets.
//! 5. [`detector`] fits per-class centroids and radii and applies the
//!    boundary-then-argmax decision rule; [`eval`] scores it.

pub mod cotrain;
pub mod data;
pub mod detector;
pub mod embedding;
mod error;
pub mod eval;
pub mod graph;
pub mod numerics;
pub mod oodgen;
pub mod project;
pub mod rng;

pub use error::{Error, Result};
