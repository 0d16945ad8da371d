//! Data-parallel additively preconditioned trust-region (APTS) training.
//!
//! The crate trains small feed-forward networks by running several local
//! trust-region solvers on data subdomains, combining their steps, and
//! globalizing the result with an outer trust-region loop. Hessian models
//! use limited-memory SR1 pairs and the trust-region subproblem is solved
//! exactly in the compact eigenbasis.

pub mod apts;
pub mod baselines;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod lsr1;
pub mod model;
pub mod obs;
pub mod selftest;
pub mod trust_region;

pub use error::{Error, Result};
