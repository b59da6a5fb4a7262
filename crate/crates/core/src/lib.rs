//! Chunk-level contrastive policy optimization for a toy autoregressive
//! few-step generator.

// `!(x > 0.0)` is how validation rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapters;
mod binio;
pub mod cli;
pub mod copo;
pub mod error;
pub mod neighborhood;
pub mod numerics;
pub mod optim;
pub mod rewards;
pub mod rollout;
pub mod semipolicy;
pub mod toygen;

pub use error::{Error, Result};
