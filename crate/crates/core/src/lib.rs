//! Bayesian binomial models for county mortality with CAR spatial effects and
//! county-specific linear time trends.
//!
//! The crate covers the full pipeline: ingesting county-year panels and
//! covariates ([`data`]), building the adjacency graph and merging
//! low-population counties ([`graph`]), evaluating the model densities
//! ([`model`]), Metropolis-within-Gibbs sampling ([`sampler`]), convergence
//! checks ([`diagnostics`]), posterior tables ([`summary`]) and forward
//! simulation for recovery tests ([`synthetic`]).

pub mod data;
pub mod diagnostics;
pub mod draws;
pub mod fips;
pub mod graph;
pub mod model;
pub mod sampler;
pub mod summary;
pub mod synthetic;
