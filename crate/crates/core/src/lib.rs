//! Sound-symbolism robustness toolkit.
//!
//! Ingests segmented wordlists, annotates phonological feature categories,
//! fits Bayesian Dirichlet regressions with phylogenetic and areal
//! Gaussian-process controls, and classifies concept-level effects against a
//! practical-equivalence region. Everything is deterministic given a seed.

pub mod corpus;
pub mod covariance;
pub mod evaluate;
pub mod inference;
pub mod linalg;
pub mod model;
pub mod phonology;
pub mod simulate;
pub mod special;
