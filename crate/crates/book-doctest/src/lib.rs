//! Runs the code listings of the guide in `book/` as doctests.
//!
//! mdbook cannot link external crates when testing listings, so each
//! chapter is pulled in as the documentation of an empty module and
//! `cargo test` checks it like any other doc comment.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/data-model.md")]
pub mod data_model {}
#[doc = include_str!("../../../book/src/captions.md")]
pub mod captions {}
#[doc = include_str!("../../../book/src/local-alignment.md")]
pub mod local_alignment {}
#[doc = include_str!("../../../book/src/refinement.md")]
pub mod refinement {}
#[doc = include_str!("../../../book/src/scoring.md")]
pub mod scoring {}
#[doc = include_str!("../../../book/src/benchmarks.md")]
pub mod benchmarks {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
