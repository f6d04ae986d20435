//! Sequential Bayesian inference for nonlinear state-space models.
//!
//! The crate provides particle filters, ensemble Kalman filters and the
//! nested parameter filters built on top of them (SMC², PEnKF, the nested
//! EnKF and its Rao-Blackwellised particle variant), the Metropolis-Hastings
//! machinery used to rejuvenate parameter particles, four benchmark models
//! and the exact Kalman filter used as a reference likelihood.
//!
//! All randomness is drawn from [`rng::RngStream`]s addressed by
//! (time, particle, phase), so results do not depend on the number of worker
//! threads.

// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dist;
pub mod enkf;
pub mod error;
pub mod filters;
pub mod kalman;
pub mod linalg;
pub mod model;
pub mod models;
pub mod pf;
pub mod rbsmc2;
pub mod rejuvenate;
pub mod rng;
pub mod summary;

pub use error::{FilterError, Result};
pub use model::{Dataset, GaussianObs, Model, Observation, ParamVector, StateEnsemble};
pub use rng::{Phase, RngStream};
