//! Numerical lab for singular stochastic control of evolution equations on
//! positive cones: irreversible capacity expansion driven by monotone
//! vector-measure controls.

// `!(x > 0.0)` deliberately rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bek;
pub mod config;
pub mod control;
pub mod drivers;
pub mod error;
pub mod foc;
pub mod grid;
pub mod io;
pub mod payoff;
pub mod pipeline;
pub mod policy;
pub mod semigroup;
pub mod stats;
pub mod time;

pub use error::{Error, Result};
