//! Multilevel particle filters for SDEs driven by pure-jump Lévy processes.
//!
//! The crate is organised bottom-up:
//!
//! * [`levy_measure`]: Lévy measures, jump thresholds and per-level constants.
//! * [`discretize`]: single-level jump skeletons and the Euler kernel `Q^l`.
//! * [`couple`]: the coupled fine/coarse kernel `M^l`.
//! * [`smc`]: the bootstrap particle filter with adaptive multinomial resampling.
//! * [`mlpf`]: coupled particle filters, coupled resampling and the multilevel
//!   estimators, plus level and sample-size allocation.
//! * [`models`]: the filtering and barrier-option problems.
//! * [`bench`]: rate estimation, reference solutions and MSE-vs-cost sweeps.

pub mod bench;
pub mod couple;
pub mod discretize;
pub mod error;
pub mod levy_measure;
pub mod mlpf;
pub mod models;
pub mod rng;
pub mod smc;

pub use error::{Branch, Error, Result};
