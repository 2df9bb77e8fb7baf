//! Varying-coefficient mixture-of-experts estimation.
//!
//! The model ties a mixture of expert regressions to a scalar index `u` in
//! `[0, 1]`: gating probabilities and expert coefficients are smooth unknown
//! functions of `u`, estimated at a grid of points by maximizing a
//! kernel-weighted local log-likelihood with a label-consistent EM algorithm.
//! On top of the fitted coefficient curves the crate provides
//!
//! * likelihood cross-validation for bandwidth selection ([`bandwidth`]),
//! * sandwich covariance estimates, simultaneous confidence bands, and three
//!   tests of coefficient constancy ([`inference`]),
//! * synthetic-data scenarios and a replication harness that scores fits
//!   against known truth ([`simulate`]),
//! * CSV/JSON input and output shared with the command-line driver ([`io`]).
//!
//! Estimation entry points live in [`fit`]: [`fit::fit_vcmoe`] for fully
//! functional coefficients and [`fit::fit_constant`] for the partially
//! constant variant used by the constancy tests.

pub mod bandwidth;
pub mod error;
pub mod fit;
pub mod inference;
pub mod io;
pub mod kernel;
pub mod model;
mod quad;
pub mod simulate;

pub use error::{Error, Result};
