//! Tag-guided HOI detection, caption generation and threat evaluation on
//! synthetic scenes.
//!
//! The pipeline has three parts: a set-prediction interaction encoder over
//! rendered scenes, a caption decoder that consumes serialized interaction
//! tags fused with visual features, and an evaluation layer (multi-label tag
//! metrics, deterministic rubric proxies, optional remote judge).

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod hungarian;
pub mod nn;
pub mod plot;
pub mod trainer;

pub use error::{Error, Result};
