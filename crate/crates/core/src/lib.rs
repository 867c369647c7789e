//! Mean-field equilibrium between a broker and a population of informed traders.

pub mod equilibrium;
pub mod error;
pub mod ode;
pub mod params;
pub mod rng;
pub mod simulator;
pub mod verification;

pub use error::{Error, Result};
pub use params::{make_grid, validate_params, ModelParams, TimeGrid, TraderType, TypeDistribution};
