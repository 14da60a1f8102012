//! Retrieval of continuous-time event sequences with neural marked temporal
//! point process relevance models and learned hash codes.

pub mod datasynth;
pub mod diff;
pub mod error;
pub mod evalmetrics;
pub mod hashing;
pub mod model;
pub mod mtpp;
pub mod nn;
pub mod relevance;
pub mod retrieval;
pub mod seq;
pub mod trainer;
pub mod unwarp;

pub use error::{Error, Result};

/// Library version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/sequences.md")]
    mod sequences {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/relevance.md")]
    mod relevance {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/hashing.md")]
    mod hashing {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
