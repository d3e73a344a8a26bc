//! Semi-supervised video semantic segmentation with entropy-filtered pseudo
//! labels, at desk scale.
//!
//! A teacher and a student segmenter are trained on the labeled clips, their
//! test-time-augmented predictions are ensembled into pseudo labels for the
//! unlabeled clips, and the student is fine-tuned on both with a
//! cross-entropy + pseudo-label cross-entropy + contrastive objective in
//! which low-confidence pixels act as negatives.

pub mod config;
pub mod error;
pub mod formats;
pub mod infer;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod pseudolab;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod tinynet;

pub use error::{Error, Result};
