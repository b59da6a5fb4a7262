//! Vector math, labelled random streams, and reverse-mode gradients.
//!
//! Everything here works on plain `f64` slices. The toy generator is small
//! enough that a scalar-free, vector-node tape is all the autodiff it needs.

mod fd;
mod rng;
mod tape;
pub mod vecops;

pub use fd::{finite_diff_grad, max_relative_error, relative_error, DEFAULT_FD_STEP};
pub use rng::RngStream;
pub use tape::{grad, Tape, Var};
pub use vecops::softmax_neg_scaled;
