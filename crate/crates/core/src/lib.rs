//! Gradient-EM empirical-Bayes meta-learning.
//!
//! A diagonal-Gaussian prior over the weights of a small MLP is learned
//! across tasks. Each task's posterior is fit by variational inference and
//! the prior is updated with the closed-form posterior expectation of the
//! prior score, so no derivative ever flows through the inner optimizer.
//! An exact conjugate Gaussian-linear oracle verifies the estimators.

pub mod config;
pub mod error;
pub mod experiments;
pub mod gaussian;
pub mod meta;
pub mod nn;
pub mod oracle;
pub mod stats;
pub mod tasks;
pub mod vi;

pub use error::{Error, Result};
pub use gaussian::{delta_limit_score, expected_prior_score, DiagGaussian, PriorGrad};
pub use nn::{ArchSpec, Activation, Dataset, FlatParams, LayerParams};
