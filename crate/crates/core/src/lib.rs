//! Training-free attribute–object binding rescoring for dual-encoder
//! (CLIP-style) embeddings.
//!
//! Given precomputed image patch embeddings and caption token embeddings,
//! the crate scores how well a caption describes an image:
//!
//! 1. [`alignment`]: each caption token is matched to its top-K most similar
//!    patches, giving a local score `S_base`.
//! 2. [`refine`]: attribute and object tokens are rewritten with binding
//!    vectors estimated from phrase embeddings of nearby concepts.
//! 3. [`scoring`]: the refined local score, the binding difference and the
//!    global `[EOT]`–`[CLS]` similarity are fused into `S_final`.
//!
//! [`bench`] runs pairwise and retrieval evaluations over a [`bench::Corpus`];
//! [`bundle`] reads and writes the on-disk embedding format.
//!
//! ```
//! use abe_core::synthetic::toy;
//! use abe_core::caption::resolve_token_spans;
//! use abe_core::scoring::score_pair;
//!
//! let t = toy();
//! let structure = resolve_token_spans(&t.structure, &t.text)?.structure;
//! let report = score_pair(&t.image, &t.text, &structure, Some(&t.resources), &t.params)?;
//! assert!(report.s_refine > report.s_base);
//! assert!((report.s_global - 0.8).abs() < 1e-12);
//! # Ok::<(), abe_core::AbeError>(())
//! ```

pub mod alignment;
pub mod bench;
pub mod bundle;
pub mod caption;
pub mod embedding;
pub mod error;
pub mod refine;
pub mod scoring;
pub mod synthetic;

pub use error::{AbeError, Result};
