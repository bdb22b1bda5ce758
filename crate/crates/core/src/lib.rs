pub mod actor;
pub mod critic;
pub mod datagen;
pub mod diff;
pub mod error;
pub mod graph;
mod linalg;
pub mod pipeline;
pub mod rlopt;
pub mod scoring;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/library.md")]
    mod library {}
    #[doc = include_str!("../../../book/src/scoring.md")]
    mod scoring {}
    #[doc = include_str!("../../../book/src/algorithms.md")]
    mod algorithms {}
}
