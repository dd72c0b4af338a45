//! Simulation and moment-based calibration of multivariate generalized Vasicek
//! rate models `dr = Θ(b − r)dt + σ dX` driven by stationary-increment noise.

// `!(x > 0.0)` is used throughout to reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod estimate;
pub mod experiment;
pub mod matcore;
pub mod noise;
pub mod ratesio;
pub mod riccati;
pub mod simulate;

pub use error::{Error, Result};
