//! Frame-synchronous, alignment-emitting transducer search.

use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::align::{argmax, Alignment, LabelSequence, BLANK};
use crate::error::{contract, Result};

/// What the search needs from a transducer: per-frame output distributions
/// conditioned on a prediction state, and state updates on emitted labels.
pub trait Transducer {
    type State: Clone;

    fn frames(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn initial_state(&self) -> Self::State;
    /// Log-probabilities over blank and labels at `frame` given `state`.
    fn log_probs(&self, frame: usize, state: &Self::State) -> Vec<f64>;
    fn advance(&self, state: &Self::State, label: usize) -> Self::State;
}

/// One search result. The alignment holds exactly one blank per frame, so
/// its length is `T′ + |labels|`.
#[derive(Clone, Debug)]
pub struct DecodeHypothesis<S> {
    pub labels: LabelSequence,
    pub alignment: Alignment,
    pub log_score: f64,
    pub pred_state: S,
}

#[derive(Clone)]
struct Partial<S> {
    labels: Vec<usize>,
    alignment: Vec<usize>,
    score: f64,
    state: S,
    emitted_here: usize,
}

struct Candidate {
    parent: usize,
    token: usize,
    score: f64,
}

fn by_score_desc(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// Beam search over the lattice.
///
/// Within a frame every live hypothesis proposes its blank (which closes the
/// frame) and, while it has emitted fewer than `max_emit_per_frame` labels
/// here, each label. Blank and label proposals compete in one ranking and
/// the best `beam_size` survive; closed hypotheses wait for the next frame.
/// A label may not directly repeat the previous label inside one frame:
/// collapse would merge the pair, and the alignment must collapse to exactly
/// the emitted labels.
/// Ties keep generation order, so lower token ids win. With `beam_size == 1`
/// this is exactly the argmax-at-every-step greedy loop.
pub fn beam_search<M: Transducer>(
    model: &M,
    beam_size: usize,
    max_emit_per_frame: usize,
) -> Result<Vec<DecodeHypothesis<M::State>>> {
    if beam_size == 0 || max_emit_per_frame == 0 {
        return Err(contract("beam_size and max_emit_per_frame must be at least 1"));
    }
    if model.frames() == 0 {
        return Err(contract("cannot decode zero frames"));
    }
    let classes = model.num_classes();
    let mut beam = alloc::vec![Partial {
        labels: Vec::new(),
        alignment: Vec::new(),
        score: 0.0,
        state: model.initial_state(),
        emitted_here: 0,
    }];
    for t in 0..model.frames() {
        let mut active: Vec<Partial<M::State>> = beam
            .into_iter()
            .map(|mut h| {
                h.emitted_here = 0;
                h
            })
            .collect();
        let mut closed: Vec<Partial<M::State>> = Vec::new();
        while !active.is_empty() {
            let mut cands = Vec::new();
            for (i, h) in active.iter().enumerate() {
                let lp = model.log_probs(t, &h.state);
                cands.push(Candidate { parent: i, token: BLANK, score: h.score + lp[BLANK] });
                if h.emitted_here < max_emit_per_frame {
                    let repeat = repeat_guard(h.emitted_here, &h.labels);
                    for (k, &l) in lp.iter().enumerate().take(classes).skip(1) {
                        if Some(k) == repeat {
                            continue;
                        }
                        cands.push(Candidate { parent: i, token: k, score: h.score + l });
                    }
                }
            }
            cands.sort_by(|a, b| by_score_desc(a.score, b.score));
            cands.truncate(beam_size);
            let mut next_active = Vec::new();
            for c in cands {
                let parent = &active[c.parent];
                let mut h = parent.clone();
                h.score = c.score;
                h.alignment.push(c.token);
                if c.token == BLANK {
                    closed.push(h);
                } else {
                    h.labels.push(c.token);
                    h.state = model.advance(&parent.state, c.token);
                    h.emitted_here += 1;
                    next_active.push(h);
                }
            }
            active = next_active;
            // Extending a hypothesis only lowers its score, so once the beam of
            // closed hypotheses is full, anything below its worst is dead.
            if closed.len() >= beam_size {
                closed.sort_by(|a, b| by_score_desc(a.score, b.score));
                let floor = closed[beam_size - 1].score;
                active.retain(|h| h.score > floor);
            }
        }
        closed.sort_by(|a, b| by_score_desc(a.score, b.score));
        closed.truncate(beam_size);
        beam = closed;
    }
    Ok(beam
        .into_iter()
        .map(|h| DecodeHypothesis {
            labels: LabelSequence(h.labels),
            alignment: Alignment(h.alignment),
            log_score: h.score,
            pred_state: h.state,
        })
        .collect())
}

fn repeat_guard(emitted_here: usize, labels: &[usize]) -> Option<usize> {
    if emitted_here > 0 { labels.last().copied() } else { None }
}

/// Argmax-at-every-step decoding written without any beam bookkeeping.
pub fn greedy_decode<M: Transducer>(model: &M, max_emit_per_frame: usize) -> DecodeHypothesis<M::State> {
    let mut state = model.initial_state();
    let mut labels = Vec::new();
    let mut alignment = Vec::new();
    let mut score = 0.0;
    for t in 0..model.frames() {
        let mut emitted = 0;
        loop {
            let lp = model.log_probs(t, &state);
            let k = if emitted == max_emit_per_frame {
                BLANK
            } else {
                match repeat_guard(emitted, &labels) {
                    Some(r) => {
                        let mut masked = lp.clone();
                        masked[r] = f64::NEG_INFINITY;
                        argmax(&masked)
                    }
                    None => argmax(&lp),
                }
            };
            score += lp[k];
            alignment.push(k);
            if k == BLANK {
                break;
            }
            labels.push(k);
            state = model.advance(&state, k);
            emitted += 1;
        }
    }
    DecodeHypothesis { labels: LabelSequence(labels), alignment: Alignment(alignment), log_score: score, pred_state: state }
}
