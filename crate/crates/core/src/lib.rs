pub mod covariance;
pub mod error;
pub mod estimators;
pub mod fixtures;
pub mod harness;
pub mod network;
pub mod risk;
pub mod trips;

pub use error::{EtaError, Result};
