//! Differentiable neural input search for latent factor recommenders.
//!
//! The pipeline: ingest interaction logs ([`corpus`]), train a latent factor
//! model with a soft selection layer over feature blocks ([`lfm`], [`search`]),
//! merge and prune the embedding matrix into a sparse mixed-dimension scheme
//! ([`dimscheme`]), and benchmark against grid/random/heuristic baselines
//! ([`baselines`]) with standard metrics ([`evalkit`]).

pub mod baselines;
pub mod corpus;
pub mod dimscheme;
pub mod evalkit;
pub mod lfm;
pub mod report;
pub mod search;
