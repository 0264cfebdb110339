//! Second pass: a cascaded encoder with bounded right context, and a
//! transformer decoder that rewrites whole alignments in parallel.
//!
//! Every refinement step runs the same decoder parameters. In training each
//! step gets its own CTC loss against the target, and the next step's input
//! is the argmax of the previous output with no gradient path back.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::align::{collapse, greedy_alignment, mask_augment, Alignment, LabelSequence, Vocab};
use crate::ctc::ctc_loss;
use crate::error::{contract, Error, Result};
use crate::layers::{add_positions, AttnMask, DecoderLayer, Dropout, EncoderLayer, LayerNorm, Linear};
use crate::numcore::{ParamId, Params, Rng, Tape, Tensor, Var};

/// Right context per cascaded layer, in frames.
pub const CASCADE_RIGHT_CONTEXT: usize = 3;

fn default_clean() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineConfig {
    /// Decoder layers `L`.
    pub layers: usize,
    /// Cascaded encoder layers `L′`.
    pub cascade_layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// Refinement steps during training, `S`.
    pub train_steps: usize,
    /// Refinement steps at inference, `R`.
    pub infer_steps: usize,
    /// Per-position mask probability `p` on training inputs.
    pub mask_prob: f64,
    pub dropout: f64,
    /// Produce the next step's input from a dropout-free forward.
    #[serde(default = "default_clean")]
    pub clean_step_inputs: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            cascade_layers: 0,
            dim: 32,
            heads: 4,
            ffn_hidden: 64,
            train_steps: 3,
            infer_steps: 4,
            mask_prob: 0.0,
            dropout: 0.0,
            clean_step_inputs: true,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| Err(Error::Config { key: format!("refiner.{key}"), reason: reason.into() });
        if self.layers == 0 {
            return bad("layers", "must be at least 1");
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad("heads", "must be positive and divide dim");
        }
        if self.train_steps == 0 {
            return bad("train_steps", "must be at least 1");
        }
        if self.infer_steps == 0 {
            return bad("infer_steps", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return bad("mask_prob", "must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must be in [0, 1)");
        }
        Ok(())
    }
}

/// Projection into the refiner width followed by `L′` banded self-attention
/// layers. Output frame `t` depends on input frames `0..=t + 3·L′`.
#[derive(Clone, Debug)]
pub struct CascadedEncoder {
    pub input: Linear,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: Option<LayerNorm>,
}

/// Token embedding (labels, blank and mask), `L` decoder layers and the
/// output projection onto blank plus labels.
#[derive(Clone, Debug)]
pub struct RefineDecoder {
    pub embed: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: LayerNorm,
    pub out: Linear,
}

#[derive(Clone, Debug)]
pub struct Refiner {
    pub cfg: RefineConfig,
    pub vocab: Vocab,
    pub params: Params,
    pub cascade: CascadedEncoder,
    pub decoder: RefineDecoder,
}

/// Training objective for one utterance.
#[derive(Clone, Debug)]
pub struct RefineLoss {
    /// Mean of the per-step CTC losses.
    pub loss: Var,
    pub step_losses: Vec<f64>,
    /// Step inputs after masking, `A⁰` first.
    pub inputs: Vec<Alignment>,
}

/// Inference output: hypotheses and alignments after each step.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineOutput {
    pub per_step: Vec<LabelSequence>,
    pub alignments: Vec<Alignment>,
}

impl RefineOutput {
    pub fn final_hypothesis(&self) -> &LabelSequence {
        self.per_step.last().expect("at least one step")
    }
}

impl Refiner {
    /// `first_pass_dim` is the width of the first-pass encoder output.
    pub fn new(cfg: RefineConfig, first_pass_dim: usize, vocab: Vocab, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::derive(seed, &[0xF2]);
        let mut p = Params::new();
        let d = cfg.dim;
        let cascade = CascadedEncoder {
            input: Linear::new(&mut p, "enc1.input", first_pass_dim, d, &mut rng)?,
            layers: (0..cfg.cascade_layers)
                .map(|i| EncoderLayer::new(&mut p, &format!("enc1.layer{i}"), d, cfg.heads, cfg.ffn_hidden, &mut rng))
                .collect::<Result<_>>()?,
            final_norm: if cfg.cascade_layers > 0 { Some(LayerNorm::new(&mut p, "enc1.ln_final", d)?) } else { None },
        };
        let decoder = RefineDecoder {
            embed: p.add_normal("refiner.embed", &[vocab.embed_size(), d], 1.0, &mut rng)?,
            layers: (0..cfg.layers)
                .map(|i| DecoderLayer::new(&mut p, &format!("refiner.layer{i}"), d, cfg.heads, cfg.ffn_hidden, &mut rng))
                .collect::<Result<_>>()?,
            final_norm: LayerNorm::new(&mut p, "refiner.ln_final", d)?,
            out: Linear::new(&mut p, "refiner.out", d, vocab.output_size(), &mut rng)?,
        };
        Ok(Self { cfg, vocab, params: p, cascade, decoder })
    }

    /// Cascaded encoder on the tape; `h0` is `T′ × D₀`.
    pub fn cascade_encode(&self, tape: &mut Tape, h0: Var, mut drop: Option<&mut Dropout<'_>>) -> Result<Var> {
        let p = &self.params;
        let x = self.cascade.input.forward(tape, p, h0)?;
        let mut x = add_positions(tape, x)?;
        for layer in &self.cascade.layers {
            x = layer.forward(tape, p, x, AttnMask::RightContext(CASCADE_RIGHT_CONTEXT), drop.as_deref_mut())?;
        }
        match &self.cascade.final_norm {
            Some(n) => n.forward(tape, p, x),
            None => Ok(x),
        }
    }

    /// Audio memory for the decoder, `T′ × D`.
    pub fn encode_audio(&self, h0: &Tensor) -> Result<Tensor> {
        if h0.require_matrix("first-pass encoding")?.0 == 0 {
            return Err(contract("cascade_encode needs at least one frame"));
        }
        let mut tape = Tape::new();
        let x = tape.constant(h0.clone());
        let out = self.cascade_encode(&mut tape, x, None)?;
        Ok(tape.value(out).clone())
    }

    /// One decoder pass on the tape: `|a_in| × (V+1)` log-probabilities.
    pub fn step_log_probs(
        &self,
        tape: &mut Tape,
        a_in: &Alignment,
        audio: Var,
        mut drop: Option<&mut Dropout<'_>>,
    ) -> Result<Var> {
        if a_in.is_empty() {
            return Err(contract("refine_step needs a non-empty alignment"));
        }
        if let Some(&bad) = a_in.0.iter().find(|&&t| t >= self.vocab.embed_size()) {
            return Err(contract(format!("token {bad} outside the refiner vocabulary")));
        }
        let p = &self.params;
        let table = tape.param(p, self.decoder.embed);
        let emb = tape.embedding(table, &a_in.0)?;
        let mut x = add_positions(tape, emb)?;
        for layer in &self.decoder.layers {
            x = layer.forward(tape, p, x, audio, drop.as_deref_mut())?;
        }
        let x = self.decoder.final_norm.forward(tape, p, x)?;
        let logits = self.decoder.out.forward(tape, p, x)?;
        tape.log_softmax_rows(logits)
    }

    /// Inference step: log-probabilities and their greedy alignment, which
    /// has the input's length and never contains the mask token.
    pub fn refine_step(&self, a_in: &Alignment, audio: &Tensor) -> Result<(Tensor, Alignment)> {
        let mut tape = Tape::new();
        let mem = tape.constant(audio.clone());
        let lp = self.step_log_probs(&mut tape, a_in, mem, None)?;
        let lp = tape.value(lp).clone();
        let a_out = greedy_alignment(&lp)?;
        Ok((lp, a_out))
    }

    /// `S`-step training loss for one utterance. Returns `None` when the
    /// target cannot be aligned within `|a0|` positions; every step has the
    /// same length, so feasibility is all or nothing.
    ///
    /// `rng` drives masking and dropout.
    pub fn refine_train_loss(
        &self,
        tape: &mut Tape,
        h0: &Tensor,
        a0: &Alignment,
        target: &LabelSequence,
        rng: &mut Rng,
    ) -> Result<Option<RefineLoss>> {
        if a0.len() < target.min_ctc_frames() {
            return Ok(None);
        }
        let mut mask_rng = rng.fork();
        let mut drop_rng = rng.fork();
        let rate = self.cfg.dropout;
        let h = tape.constant(h0.clone());
        let audio = {
            let mut d = Dropout { rate, rng: &mut drop_rng };
            self.cascade_encode(tape, h, Some(&mut d))?
        };
        let clean_audio = if rate > 0.0 && self.cfg.clean_step_inputs {
            Some(self.encode_audio(h0)?)
        } else {
            None
        };
        let mut prev = a0.clone();
        let mut losses = Vec::with_capacity(self.cfg.train_steps);
        let mut step_losses = Vec::with_capacity(self.cfg.train_steps);
        let mut inputs = Vec::with_capacity(self.cfg.train_steps);
        for step in 0..self.cfg.train_steps {
            let input = mask_augment(&prev, self.cfg.mask_prob, self.vocab, &mut mask_rng)?;
            let lp = {
                let mut d = Dropout { rate, rng: &mut drop_rng };
                self.step_log_probs(tape, &input, audio, Some(&mut d))?
            };
            let l = ctc_loss(tape, lp, target)?;
            if !l.feasible {
                return Ok(None);
            }
            step_losses.push(tape.value(l.loss).item());
            losses.push(l.loss);
            if step + 1 < self.cfg.train_steps {
                prev = match &clean_audio {
                    Some(mem) => self.refine_step(&input, mem)?.1,
                    None => greedy_alignment(tape.value(lp))?,
                };
            }
            inputs.push(input);
        }
        let loss = tape.mean_of(&losses)?;
        Ok(Some(RefineLoss { loss, step_losses, inputs }))
    }

    /// Runs `steps` refinement steps from `a0` without masking.
    pub fn refine_decode(&self, h0: &Tensor, a0: &Alignment, steps: usize) -> Result<RefineOutput> {
        if steps == 0 {
            return Err(contract("refine_decode needs at least one step"));
        }
        let audio = self.encode_audio(h0)?;
        let mut prev = a0.clone();
        let mut out = RefineOutput { per_step: Vec::with_capacity(steps), alignments: Vec::with_capacity(steps) };
        for _ in 0..steps {
            let (_, a) = self.refine_step(&prev, &audio)?;
            out.per_step.push(collapse(&a, self.vocab)?);
            out.alignments.push(a.clone());
            prev = a;
        }
        Ok(out)
    }

    /// Largest frame offset the cascade can look ahead.
    pub fn lookahead(&self) -> usize {
        CASCADE_RIGHT_CONTEXT * self.cfg.cascade_layers
    }
}
