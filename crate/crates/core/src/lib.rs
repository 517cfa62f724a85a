//! Offline reinforcement learning in linearly q-pi-realizable finite-horizon MDPs.
// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod design;
pub mod envs;
pub mod error;
pub mod learner;
pub mod linalg;
pub mod mdp;
pub mod oracles;
pub mod skipping;

pub use error::{Error, Result};
