//! Sparse Gaussian-process binary classification with a FITC likelihood
//! approximation, trained by expectation propagation (EP), stochastic
//! expectation propagation (SEP) or assumed density filtering (ADF).
//!
//! The posterior over the `m` inducing values is a Gaussian `q` kept in
//! natural form. EP stores one rank-one factor per training instance (three
//! scalars each), SEP stores a single global factor whose size depends only
//! on `m`, and ADF folds every projected factor straight into `q`.
//!
//! Kernel hyperparameters and inducing-point locations are learned by
//! gradient ascent on the EP energy, either in batch mode or with unbiased
//! minibatch estimates of the gradient.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod fitc;
pub mod gaussian;
pub mod hypergrad;
pub mod inference;
pub mod kernel;
pub mod linalg;
pub mod oracle;
pub mod sites;

pub use data::Dataset;
pub use error::{Error, Result};
pub use gaussian::{GaussianMoments, GaussianNatural, Method, SiteParams};
pub use inference::{fit, ModelState, TraceLog, TrainConfig};
pub use kernel::{GramResult, HyperIndex, HyperParams};
