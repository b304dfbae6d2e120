//! Experiment runner for HyperAgent bandits: configs, seeded parallel runs,
//! CSV results, SVG figures and statistical certification.

pub mod aggregate;
pub mod certify;
pub mod config;
pub mod error;
pub mod experiment;
pub mod fixtures;
pub mod output;
pub mod plot;
pub mod seeds;
pub mod sim;

pub use error::{Result, RunnerError};
