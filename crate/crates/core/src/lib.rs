//! Bayesian daily prediction of survey response propensity.
//!
//! The crate fits an attempt-level logistic hazard model, builds normal
//! priors for its coefficients from historical quarters or published
//! estimates, refits the model each day of a quarter by random-walk
//! Metropolis, and scores daily predictions against end-of-quarter
//! benchmarks. A simulator produces multi-quarter call-record data with
//! known coefficients.

pub mod error;
pub mod io;
mod linalg;
pub mod mcmc;
pub mod mle;
pub mod model;
pub mod priors;
pub mod rsd;
pub mod seed;
pub mod sim;
pub mod special;

pub use error::{Error, Result};
pub use linalg::{serde_matrix, serde_vector};

/// Version stamped into every file this crate writes.
pub const FORMAT_VERSION: u32 = 1;

pub(crate) fn format_version() -> u32 {
    FORMAT_VERSION
}
