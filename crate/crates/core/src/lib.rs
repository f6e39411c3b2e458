//! Meta-analytic structural equation modelling on study-level correlations.
//!
//! The pipeline maps per-study measures to canonical variables, forms
//! composite correlations where a study measured a construct several ways,
//! pools each variable pair with a random-effects model, assembles the pooled
//! matrix and fits recursive path models to it by maximum likelihood.

pub mod cli;
pub mod composite;
pub mod dataset;
pub mod error;
pub mod meta;
pub mod pipeline;
pub mod pooledmatrix;
pub mod report;
pub mod sem;
pub mod stats;

pub use error::{Error, Result};
