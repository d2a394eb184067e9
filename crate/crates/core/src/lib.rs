//! Bayesian multi-view latent variable model with a discriminative head.

pub mod classify;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod impute;
pub mod inference;
pub mod interpret;
pub mod linalg;
pub mod model;
pub mod preprocess;
pub mod synthetic;
