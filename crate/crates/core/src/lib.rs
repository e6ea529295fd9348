//! Energy-dissipative evolutionary DeepONet.
//!
//! A branch/trunk operator network is first fitted to initial-condition data
//! ([`pretrain`]); its parameters are then evolved in time by solving, at every
//! step, a least-squares problem whose right-hand side is the gradient-flow
//! velocity rescaled by a scalar auxiliary variable ([`sav_evolve`]). The
//! auxiliary variable obeys a discrete dissipation law regardless of the step
//! size, which the [`stepping`] controller exploits for adaptive steps and
//! restarts.

// `!(x > 0.0)` deliberately rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod deeponet;
pub mod energy;
pub mod error;
pub mod harness;
pub mod net_core;
pub mod pretrain;
pub mod reference;
pub mod sav_evolve;
pub mod stepping;

pub use error::{Error, Result};
