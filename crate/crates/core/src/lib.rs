pub mod autoencoder;
pub mod baselines;
pub mod covariate;
pub mod error;
pub mod estimator;
pub mod io;
pub mod nn;
pub mod panel;
pub mod parallel;
pub mod seeds;
pub mod simulation;

pub use error::{Error, Result};
