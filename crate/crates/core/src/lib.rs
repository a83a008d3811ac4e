//! Adaptive sequential Monte Carlo for structured Bayesian cross-validation.
//!
//! Baseline posterior draws are transported to case-deleted posteriors along
//! adaptively chosen tempering paths. Each fold ends either with a
//! Pareto-smoothed importance sampling estimate or, when the tail diagnostic
//! rejects it, with a resample-and-rejuvenate step.

pub mod engine;
pub mod error;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod models;
pub mod path;
pub mod scalar;
pub mod scheme;
pub mod weights;

pub use error::{Error, Result};
pub use model::{joint_predictive_log_density, Exponents, Layout, Model, ParameterDraw};
pub use path::{DeletionPath, PathKind};
pub use scalar::Real;
pub use scheme::{DeletionScheme, EstimandSpec, Fold, LeoTarget, SchemeKind, UnitIndex};

/// Double-precision weight vector.
pub type Weights = weights::WeightVector<f64>;
/// Double-precision tail diagnostic.
pub type Pareto = weights::ParetoDiagnostic<f64>;
/// Double-precision step-solver outcome.
pub type StepSolution = path::StepSolution<f64>;
