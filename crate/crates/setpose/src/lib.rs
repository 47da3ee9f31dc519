//! Desk-scale end-to-end multi-person pose estimation.
//!
//! The crate trains a small query-based pose detector on synthetic stick-figure
//! scenes and studies how the decoder's self-attention is organized: every
//! person is represented by K keypoint queries plus one instance query, and
//! self-attention runs first within each person's query group and then across
//! people among queries of the same type.
//!
//! Modules:
//! - [`numgrad`]: reverse-mode autodiff over dense tensors (tape + ops).
//! - [`attention`]: grouped/masked/standard self-attention and multi-scale
//!   deformable cross-attention, built on the tape.
//! - [`model`]: backbone, encoder, query construction, decoder, pose heads.
//! - [`matching`]: OKS, Hungarian assignment, and the training loss.
//! - [`synthpose`]: synthetic scene sampler, renderer, and dataset file format.
//! - [`metrics`]: OKS-based average precision and duplicate-rate diagnostics.
//! - [`harness`]: config, optimizer, training loop, checkpoints, ablations.
//! - [`bench`]: analytic cost model and wall-clock microbenchmarks for the
//!   self-attention variants.

pub mod attention;
pub mod bench;
pub mod error;
pub mod harness;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod numgrad;
pub mod synthpose;

pub use error::{Error, Result};
