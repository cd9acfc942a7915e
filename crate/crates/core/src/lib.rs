//! Action spotting with temporally-aware learnable pooling.
//!
//! Frame features are projected, pooled over a sliding window (optionally
//! with separate past/future vocabularies), classified with independent
//! sigmoids, and reduced to single-timestamp spots by temporal NMS.

pub mod ablation;
pub mod alloc_stats;
pub mod bench;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod numerics;
pub mod pooling;
pub mod spotting;
pub mod training;

pub use error::{Error, FormatError, Result};
