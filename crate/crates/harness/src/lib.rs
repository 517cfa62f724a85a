//! Experiment orchestration for qpilab: configuration, persistence, sweeps,
//! lemma verification and result plots.
// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod experiment;
pub mod io;
pub mod plot;
pub mod verify;

pub use error::{HarnessError, Result};
