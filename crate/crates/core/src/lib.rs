//! Viewpoint-stability analytics for image-featurizer embeddings.
//!
//! Given dense turntable (or free-camera) captures with precomputed
//! embeddings, the crate scores how sharply each view's embedding changes
//! under small pose perturbations, thresholds those scores into
//! stable/unstable labels, splits unstable views into accidental and OOD
//! sub-types, trains a per-embedding stability classifier, measures
//! cross-featurizer label agreement, and evaluates downstream accuracy per
//! stability category.

pub mod agreement;
pub mod classifier;
pub mod cluster;
pub mod downstream;
pub mod error;
pub mod instability;
pub mod io;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
