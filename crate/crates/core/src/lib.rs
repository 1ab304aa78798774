//! Transformer-GRU action anticipation with visual-semantic fusion.
//!
//! The pipeline: a semantic feature for the observed action (ground truth
//! or estimated from the observation) is fused with the visual feature
//! sequence, encoded by a Post-Norm Transformer, pooled into a summary that
//! seeds a GRU, and the GRU is iterated once per anticipation step before a
//! linear classifier scores the target action.

pub mod datamodel;
pub mod decoder;
pub mod encoder;
pub mod engine;
pub mod error;
pub mod fusion;
pub mod model;
pub mod numcore;
pub mod objective;
pub mod semantics;

pub use error::{Error, Result};
