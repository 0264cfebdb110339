use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::decode::Transducer;
use super::loss::rnnt_loss_on_tape;
use crate::align::{LabelSequence, Vocab, BLANK};
use crate::error::{Error, Result};
use crate::layers::{add_positions, AttnMask, Dropout, EncoderLayer, LayerNorm, Linear};
use crate::numcore::{math, tensor_ops, ParamId, Params, Rng, Tape, Tensor, Var};

/// First-pass hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FirstPassConfig {
    pub feature_dim: usize,
    pub num_labels: usize,
    /// Encoder, prediction and joint width.
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub max_emit_per_frame: usize,
    pub dropout: f64,
}

impl FirstPassConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| Err(Error::Config { key: format!("first_pass.{key}"), reason: reason.into() });
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad("heads", "must be positive and divide dim");
        }
        if self.num_labels == 0 {
            return bad("num_labels", "must be positive");
        }
        if self.max_emit_per_frame == 0 {
            return bad("max_emit_per_frame", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must be in [0, 1)");
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.num_labels)
    }
}

/// Causal attention encoder, one-layer recurrent prediction network and an
/// additive joint network.
#[derive(Clone, Debug)]
pub struct FirstPassModel {
    pub cfg: FirstPassConfig,
    pub params: Params,
    input: Linear,
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
    embed: ParamId,
    rnn_in: ParamId,
    rnn_rec: ParamId,
    rnn_bias: ParamId,
    joint_enc: Linear,
    joint_pred: ParamId,
    joint_out: Linear,
}

/// Prediction network state: hidden vector and its joint projection.
#[derive(Clone, Debug, PartialEq)]
pub struct PredState {
    pub hidden: Vec<f64>,
    proj: Vec<f64>,
}

impl FirstPassModel {
    pub fn new(cfg: FirstPassConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::derive(seed, &[0xF1]);
        let mut p = Params::new();
        let d = cfg.dim;
        let input = Linear::new(&mut p, "enc0.input", cfg.feature_dim, d, &mut rng)?;
        let layers = (0..cfg.layers)
            .map(|i| EncoderLayer::new(&mut p, &format!("enc0.layer{i}"), d, cfg.heads, cfg.ffn_hidden, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNorm::new(&mut p, "enc0.ln_final", d)?;
        let embed = p.add_normal("pred.embed", &[cfg.num_labels + 1, d], 1.0 / math::sqrt(d as f64), &mut rng)?;
        let rnn_in = p.add_linear_weight("pred.rnn.w_in", d, d, &mut rng)?;
        let rnn_rec = p.add_normal("pred.rnn.w_rec", &[d, d], 0.5 / math::sqrt(d as f64), &mut rng)?;
        let rnn_bias = p.add_filled("pred.rnn.b", &[d], 0.0)?;
        let joint_enc = Linear::new(&mut p, "joint.enc", d, d, &mut rng)?;
        let joint_pred = p.add_linear_weight("joint.pred.w", d, d, &mut rng)?;
        let joint_out = Linear::new(&mut p, "joint.out", d, cfg.num_labels + 1, &mut rng)?;
        Ok(Self { cfg, params: p, input, layers, final_norm, embed, rnn_in, rnn_rec, rnn_bias, joint_enc, joint_pred, joint_out })
    }

    pub fn vocab(&self) -> Vocab {
        self.cfg.vocab()
    }

    /// Causal encoder on the tape: frame `t` only sees frames `0..=t`.
    pub fn encode(&self, tape: &mut Tape, features: Var, mut drop: Option<&mut Dropout<'_>>) -> Result<Var> {
        let p = &self.params;
        let x = self.input.forward(tape, p, features)?;
        let mut x = add_positions(tape, x)?;
        for layer in &self.layers {
            x = layer.forward(tape, p, x, AttnMask::RightContext(0), drop.as_deref_mut())?;
        }
        self.final_norm.forward(tape, p, x)
    }

    /// `T′ × F` features to `T′ × D₀` encodings.
    pub fn encode_causal(&self, features: &Tensor) -> Result<Tensor> {
        features.require_matrix("features")?;
        let mut tape = Tape::new();
        let f = tape.constant(features.clone());
        let out = self.encode(&mut tape, f, None)?;
        Ok(tape.value(out).clone())
    }

    /// Prediction outputs after `0..=U` labels, `(U+1) × D₀`.
    fn predict(&self, tape: &mut Tape, target: &LabelSequence) -> Result<Var> {
        let p = &self.params;
        let mut ids = vec![BLANK];
        ids.extend_from_slice(&target.0);
        let table = tape.param(p, self.embed);
        let emb = tape.embedding(table, &ids)?;
        let w_in = tape.param(p, self.rnn_in);
        let w_rec = tape.param(p, self.rnn_rec);
        let b = tape.param(p, self.rnn_bias);
        let driven = tape.matmul(emb, w_in)?;
        let driven = tape.add_row(driven, b)?;
        let mut outs = Vec::with_capacity(ids.len());
        let mut h: Option<Var> = None;
        for u in 0..ids.len() {
            let x = tape.slice_rows(driven, u, 1)?;
            let pre = match h {
                Some(prev) => {
                    let r = tape.matmul(prev, w_rec)?;
                    tape.add(x, r)?
                }
                None => x,
            };
            let next = tape.tanh(pre);
            outs.push(next);
            h = Some(next);
        }
        crate::layers::stack_rows(tape, &outs)
    }

    /// Lattice log-probabilities `(T′·(U+1)) × (V+1)`.
    pub fn lattice_log_probs(&self, tape: &mut Tape, enc: Var, target: &LabelSequence) -> Result<Var> {
        let p = &self.params;
        let pred = self.predict(tape, target)?;
        let e = self.joint_enc.forward(tape, p, enc)?;
        let wp = tape.param(p, self.joint_pred);
        let q = tape.matmul(pred, wp)?;
        let z = tape.outer_add_rows(e, q)?;
        let z = tape.tanh(z);
        let logits = self.joint_out.forward(tape, p, z)?;
        tape.log_softmax_rows(logits)
    }

    /// Transducer loss of one utterance on the tape.
    pub fn loss(
        &self,
        tape: &mut Tape,
        features: &Tensor,
        target: &LabelSequence,
        drop: Option<&mut Dropout<'_>>,
    ) -> Result<Var> {
        let f = tape.constant(features.clone());
        let enc = self.encode(tape, f, drop)?;
        let frames = tape.value(enc).rows();
        let lp = self.lattice_log_probs(tape, enc, target)?;
        rnnt_loss_on_tape(tape, lp, frames, target)
    }

    /// Decoding view over one utterance's encoder output.
    pub fn scorer(&self, enc: &Tensor) -> Result<FirstPassScorer<'_>> {
        let (frames, d) = enc.require_matrix("encoder output")?;
        let w = self.params.value(self.joint_enc.weight);
        let b = self.params.value(self.joint_enc.bias);
        let mut enc_proj = tensor_ops::matmul(enc.data(), w.data(), frames, d, d);
        for r in 0..frames {
            for (o, bv) in enc_proj[r * d..(r + 1) * d].iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(FirstPassScorer { model: self, frames, enc_proj })
    }

    fn pred_step(&self, hidden: Option<&[f64]>, label: usize) -> PredState {
        let d = self.cfg.dim;
        let p = &self.params;
        let emb = &p.value(self.embed).row(label);
        let mut pre = tensor_ops::matmul(emb, p.value(self.rnn_in).data(), 1, d, d);
        for (o, b) in pre.iter_mut().zip(p.value(self.rnn_bias).data()) {
            *o += b;
        }
        if let Some(h) = hidden {
            let r = tensor_ops::matmul(h, p.value(self.rnn_rec).data(), 1, d, d);
            for (o, v) in pre.iter_mut().zip(&r) {
                *o += v;
            }
        }
        let hidden: Vec<f64> = pre.iter().map(|&v| math::tanh(v)).collect();
        let proj = tensor_ops::matmul(&hidden, p.value(self.joint_pred).data(), 1, d, d);
        PredState { hidden, proj }
    }
}

/// Joint network evaluation for decoding one utterance.
pub struct FirstPassScorer<'m> {
    model: &'m FirstPassModel,
    frames: usize,
    enc_proj: Vec<f64>,
}

impl Transducer for FirstPassScorer<'_> {
    type State = PredState;

    fn frames(&self) -> usize {
        self.frames
    }

    fn num_classes(&self) -> usize {
        self.model.cfg.num_labels + 1
    }

    fn initial_state(&self) -> PredState {
        self.model.pred_step(None, BLANK)
    }

    fn log_probs(&self, frame: usize, state: &PredState) -> Vec<f64> {
        let m = self.model;
        let d = m.cfg.dim;
        let e = &self.enc_proj[frame * d..(frame + 1) * d];
        let z: Vec<f64> = e.iter().zip(&state.proj).map(|(a, b)| math::tanh(a + b)).collect();
        let w = m.params.value(m.joint_out.weight);
        let mut logits = tensor_ops::matmul(&z, w.data(), 1, d, w.cols());
        for (o, b) in logits.iter_mut().zip(m.params.value(m.joint_out.bias).data()) {
            *o += b;
        }
        let lse = math::logsumexp_unchecked(&logits);
        logits.iter().map(|l| l - lse).collect()
    }

    fn advance(&self, state: &PredState, label: usize) -> PredState {
        self.model.pred_step(Some(&state.hidden), label)
    }
}
