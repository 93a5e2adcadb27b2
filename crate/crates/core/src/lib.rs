//! Exact stationary moments, covariance structure and aggregation limit
//! covariances of subcritical multitype Galton–Watson processes with
//! immigration, plus reproducible Monte Carlo checks of the associated
//! central limit theorems.

pub mod cli;
pub mod error;
pub mod ginar;
pub mod kronalg;
pub mod model;
pub mod moments;
pub mod simulate;
#[doc(hidden)]
pub mod testing;
pub mod verify;

pub use error::{Error, Result};
