//! Predicate-aware approximate query processing.
//!
//! A conditional variational autoencoder is trained over a table with a
//! stratified masking schedule so that, at query time, it can generate a small
//! sample conditioned on the query's equality predicates. An autoregressive
//! density model over the categorical columns estimates selectivities, which
//! answer COUNT queries and scale SUM queries. Queries with disjunctions,
//! `IN` lists, ranges and `GROUP BY` are decomposed into conjunctive
//! subqueries and recombined.
//!
//! Module map:
//!
//! - [`dataset`]: CSV ingestion, schema inference, strata statistics.
//! - [`transform`]: label encoding, KDE mode detection, mode-specific normalization.
//! - [`neural`]: dense networks, Adam, Gaussian heads and their gradients.
//! - [`masking`]: stratified, random and no-mask training masks.
//! - [`cvae`]: the conditional generative model.
//! - [`selectivity`]: the autoregressive selectivity estimator.
//! - [`sqlfront`]: SQL subset parser and DNF normalizer.
//! - [`planner`]: decomposition into conjunctive subqueries.
//! - [`engine`]: plan execution and the model file.
//! - [`evalharness`]: exact oracle, synthetic workloads and error metrics.
//! - [`synthgen`]: synthetic tables with analytic ground truth.

pub mod cvae;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod evalharness;
pub mod masking;
pub mod neural;
pub mod planner;
pub mod rng;
pub mod selectivity;
pub mod sqlfront;
pub mod synthgen;
pub mod transform;

pub use error::{Error, Result};
