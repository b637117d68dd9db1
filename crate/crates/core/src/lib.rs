//! Dual-channel watermarking for small neural text classifiers.
//!
//! The black-box channel embeds a covert trigger set (unmodified training
//! texts relabeled to the clean model's least-probable class); the white-box
//! channel trains a secondary authentication network that shares the host's
//! backbone and carries a weight watermark in its head. Verification,
//! robustness attacks and a perplexity-defense lab complete the pipeline.

pub mod attack;
pub mod checkpoint;
pub mod concealment;
pub mod corpus;
pub mod error;
pub mod material;
pub mod model;
pub mod nn;
pub mod run;
pub mod synth;
pub mod training;
pub mod verification;

pub use error::{Error, Result};
