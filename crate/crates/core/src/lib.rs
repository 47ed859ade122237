//! Joint Bayesian estimation of group-specific Gaussian copula graphical
//! models for ordinal survey data, with graphs linked through a latent-space
//! probit random-graph prior.

pub mod bdmcmc;
pub mod cli;
pub mod copula_latent;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod graph;
pub mod graph_prior;
pub mod gwishart;
pub mod marginals;
pub mod rng;
pub mod synthesis;
pub mod stats;

pub use error::{Error, Result};
pub use graph::Graph;
