//! Prompt-bank learning over frozen vision-language encoders.
//!
//! A bank of `N` learnable prompts per class is scored against an image
//! embedding, each prompt yielding its own class distribution. The prompts
//! whose distributions have the lowest entropy (up to a percentile cutoff)
//! are averaged into the final prediction. Training combines cross-entropy
//! with attribute alignment, entropy regularization and distillation from an
//! attribute teacher and an augmentation teacher.

pub mod config;
pub mod datahub;
pub mod diffcore;
pub mod encoders;
pub mod error;
pub mod evalharness;
pub mod fidelity;
pub mod losses;
pub mod promptbank;
pub mod rng;
pub mod runs;
pub mod selection;
pub mod trainer;

pub use error::{Error, ErrorCategory, Result};
