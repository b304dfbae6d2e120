//! Scalable randomized exploration for contextual bandits.
//!
//! The crate implements index-sampling agents whose hypermodel tracks an
//! approximate posterior: a closed-form incremental update for linear rewards
//! ([`linear`]), an SGD-trained hypermodel for nonlinear rewards
//! ([`hypermodel`]), the isotropic index distributions both rely on
//! ([`distributions`]), benchmark environments ([`envs`]) and a Monte-Carlo
//! certification harness for the distributional constants ([`validator`]).
//!
//! Numeric cores are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used by the agents and the experiment runner.

pub mod agents;
pub mod distributions;
pub mod envs;
pub mod error;
pub mod hbe;
pub mod hypermodel;
pub mod linear;
pub mod scalar;
pub mod validator;

pub use distributions::{DistributionKind, IndexVector};
pub use error::{Error, Result};
pub use scalar::Scalar;

/// Posterior statistics in double precision, as used by the linear agents.
pub type PosteriorStateF64 = linear::PosteriorState<f64>;
pub type PosteriorStateF32 = linear::PosteriorState<f32>;
/// Single-precision hypermodel, matching the `f32` checkpoint format.
pub type HypermodelF32 = hypermodel::Hypermodel<f32>;
pub type HypermodelF64 = hypermodel::Hypermodel<f64>;
pub type IndexVectorF64 = IndexVector<f64>;
