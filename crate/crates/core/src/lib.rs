//! Simulation of logic-locked neural accelerator neurons and search for
//! trojan keys: wrong locking keys whose corruption pattern misclassifies an
//! attacker-chosen trigger class while leaving other classes mostly intact.
//!
//! The crate is organised bottom-up:
//!
//! - [`locking`]: value-level model of a point-function locked neuron (hard
//!   key corruption, its smooth relaxation, quantization, error-rate checks).
//! - [`net`]: frozen-weight layered inference engine with lock bindings and
//!   reverse-mode differentiation with respect to the relaxed key only.
//! - [`attack`]: pseudo-labels, gradient and zeroth-order key search,
//!   exhaustive and hill-climbing oracles.
//! - [`data`]: IDX loading, synthetic blobs, splits and victim training.
//! - [`eval`]: per-class accuracy deltas, trigger distributions and the
//!   mapped-neuron sweep.
//! - [`cli`]: scenario configuration and the command implementations behind
//!   the `trojankey` binary.

pub mod attack;
pub mod cli;
pub mod data;
mod error;
pub mod eval;
pub mod locking;
pub mod net;
pub mod rng;

pub use error::{Error, Result};
