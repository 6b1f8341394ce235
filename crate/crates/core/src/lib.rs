//! Spin-glass surrogate model of neural-network loss surfaces with
//! piecewise-linear activations.
//!
//! The crate is organised by subsystem:
//!
//! * [`piecewise`] approximates activations and expands networks into path sums.
//! * [`surrogate`] is the random function `h` on the unit sphere and its conditional Hessian law.
//! * [`complexity`] holds the closed-form complexity asymptotics.
//! * [`rmt`] does GOE Monte Carlo.
//! * [`kacrice`] has the finite-N Kac-Rice formula and a brute-force critical point enumerator.
//! * [`netprobe`] collects piece-occupancy statistics of random MLPs.
//!
//! Monte-Carlo routines draw from counter-based ChaCha streams, one per
//! fixed-size chunk, and reduce chunks in order. Results are therefore
//! independent of the rayon thread count.

// `!(a < b)` is used on purpose so that NaN inputs are rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod complexity;
pub mod error;
pub mod kacrice;
pub mod mc;
pub mod netprobe;
pub mod numeric;
pub mod piecewise;
pub mod rmt;
pub mod surrogate;

pub use error::{Error, Result};
