//! Two-pass sequence transduction at desk scale: a streaming RNN-T first pass
//! emits frame alignments, and a shared-parameter transformer decoder refines
//! them in parallel with greedy CTC decoding.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, checkpoints,
//! metrics and the command line live in the `alignrefine` companion crate.
//!
//! Module map:
//!
//! - [`numcore`]: float64 tensors, a reverse-mode tape, Adam, and a
//!   counter-based RNG.
//! - [`align`]: vocabulary, the collapse operator, greedy alignment,
//!   mask augmentation and edit distance.
//! - [`ctc`]: CTC loss with an exhaustive enumeration oracle.
//! - [`rnnt`]: causal encoder, prediction and joint networks, transducer loss
//!   and alignment-emitting beam search.
//! - [`refiner`]: cascaded encoder with bounded right context and the
//!   iterative refinement decoder.
//! - [`synth`]: deterministic synthetic corpus.
//! - [`train`]: training loops and evaluation.
//! - [`verify`]: oracle, gradient and receptive-field suites.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod align;
pub mod ctc;
mod error;
pub mod layers;
pub mod numcore;
pub mod refiner;
pub mod rnnt;
pub mod synth;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
