//! Verification of released GWAS statistics against a locally private
//! partial dataset.
//!
//! A data owner releases the top-`l` association statistics together with a
//! `k`-SNP slice of the genotype matrix perturbed with randomized response. A
//! verifier recomputes the statistics from the noisy slice, compares the
//! deviation against what the mechanism alone would produce on public data,
//! and flags statistics whose deviation is out of line.

pub mod audit;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod genotype;
pub mod gwas;
pub mod kv;
pub mod ldp;
pub mod metadata;
pub mod rng;
pub mod verifier;

pub use error::{Error, Result};
