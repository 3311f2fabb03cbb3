//! Policy learning for a target population whose outcome model is a
//! partially known mixture of several labeled source populations.
//!
//! A target-treatment rule is chosen to maximize the worst-case value over
//! mixtures `delta * omega(x) + (1 - delta) * rho`, where `omega` is the fitted
//! source-membership model and `rho` ranges over the simplex.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod learner;
pub mod matrix;
pub mod membership;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod simplex;
pub mod synthetic;

pub use dataset::Dataset;
pub use error::{Error, Result};
pub use learner::{Nuisance, NuisanceSet, PdroPolicy, Policy};
pub use matrix::Matrix;
pub use simplex::SimplexVector;
