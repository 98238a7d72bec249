//! Joint relevance–preference behavior modeling for search ranking.
//!
//! The crate covers the whole offline loop: a synthetic causal world with
//! oracle labels, ID-embedding encoders, relevance and preference backbones,
//! orthogonal low-rank preference editing with dual-level adaptive fusion,
//! end-to-end BCE training, and ranking/heatmap evaluation.

pub mod backbones;
pub mod encoding;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod pipeline_io;
pub mod reconstruction;
pub mod synthworld;
pub mod training;

pub use error::{Error, Result};
