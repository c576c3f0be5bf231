//! Center-aware AIPW estimation for multi-center randomized trials.

pub mod analyze;
pub mod dataset;
pub mod design;
pub mod error;
pub mod estimators;
pub mod glm;
pub mod harness;
pub mod linalg;
pub mod mixed;
pub mod optim;
pub mod propensity;
pub mod quadrature;
pub mod rng;
pub mod simgen;
pub mod stats;
pub mod variance;

pub use error::{Error, Result};
