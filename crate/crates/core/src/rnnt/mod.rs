//! Streaming first pass: causal encoder, prediction and joint networks,
//! transducer loss, and alignment-emitting decoding.

mod decode;
mod loss;
mod model;
mod specaug;

pub use decode::{beam_search, greedy_decode, DecodeHypothesis, Transducer};
pub use loss::{rnnt_forward_backward, rnnt_loss_on_tape, rnnt_loss_oracle};
pub use model::{FirstPassConfig, FirstPassModel, FirstPassScorer, PredState};
pub use specaug::{spec_augment, SpecAugmentConfig};

use alloc::vec::Vec;

use crate::error::Result;
use crate::numcore::Tensor;

/// Decodes one utterance's features; best hypothesis first.
pub fn decode(
    model: &FirstPassModel,
    features: &Tensor,
    beam_size: usize,
    max_emit_per_frame: usize,
) -> Result<Vec<DecodeHypothesis<PredState>>> {
    let enc = model.encode_causal(features)?;
    let scorer = model.scorer(&enc)?;
    beam_search(&scorer, beam_size, max_emit_per_frame)
}

#[cfg(test)]
mod tests;
