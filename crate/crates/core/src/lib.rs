//! Stability analysis for buffered slotted-Aloha and non-adaptive CSMA.
//!
//! - [`region`]: closed-form and numerical stability / capacity regions.
//! - [`meanfield`]: mean-field ODEs, fixed points and the stability classifier.
//! - [`sim`]: slot-level Monte Carlo simulator with drift-based stability verdicts.
//! - [`experiments`]: scripted sweeps over the worked examples.
//! - [`cli`]: the `alohastab` command-line frontend.

pub mod cli;
pub mod experiments;
pub mod meanfield;
pub mod region;
pub mod sim;
