//! Collaborative speculative decoding on tabular language models: a draft
//! and a target propose tokens, and a learned arbitrator settles each
//! disagreement inside a round.

// Decoding entry points take models, task, config and rng side by side.
#![allow(clippy::too_many_arguments)]

pub mod arbitration;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod lm;
pub mod rl;
pub mod rng;
pub mod spd;

pub use error::{Error, Result};
pub use lm::{DecodeConfig, TabularModel, TaskInstance, Temperature, Token, Vocabulary};
