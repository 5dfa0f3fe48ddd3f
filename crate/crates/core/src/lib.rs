//! Multi-trait narrow-sense heritability with a Bayesian matrix-variate
//! linear mixed model.
//!
//! The model for a `d x n` phenotype matrix is
//! `Y = beta X + eta + eps` with `eta ~ MN(0, K, Sigma)` and
//! `eps ~ MN(0, I_n, Sigma_e)`, where `K` is the genomic relatedness matrix.
//! Rotating by the eigenvectors of `K` decouples individuals, and a Gibbs
//! sampler with Wishart priors on both precision matrices explores the
//! posterior.

pub mod error;
pub mod gibbs;
pub mod ingest;
pub mod kinship;
pub mod matstats;
pub mod posterior;
pub mod predict;
pub mod priorsim;
pub mod reml;
pub mod simulate;

pub use error::{Error, Result};

/// Formats a float so that parsing it back yields the identical bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}
