//! Time-dilated NNLIF Fokker–Planck laboratory.
//!
//! The crate integrates the population density equation of noisy leaky
//! integrate-and-fire neurons in the dilated time `τ` (where `dτ = (N + c) dt`),
//! maps trajectories back to the original time including jumps at firing-rate
//! blow-ups, and provides steady states, entropy diagnostics and a
//! free-boundary cross-check.

// `!(x > 0.0)` is used on purpose so that NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod freeboundary;
pub mod grid;
pub mod model;
pub mod solver;
pub mod steady;
pub mod timescale;
pub mod tridiag;

pub use error::{Error, Result};

/// 17 significant digits, `inf`/`-inf`/`nan` for non-finite values.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".to_string() } else { "-inf".to_string() }
    } else {
        format!("{:.16e}", x)
    }
}
