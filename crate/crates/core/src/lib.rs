pub mod covariance;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod geometry;
pub mod inference;
pub mod io;
pub mod mle;
pub mod optimize;
pub mod parametric;
pub mod simulation;
pub mod special;

#[cfg(test)]
mod testutil;
