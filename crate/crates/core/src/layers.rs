//! Transformer building blocks shared by both passes.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{contract, Result};
use crate::numcore::math::{cos, pow, sin};
use crate::numcore::{ParamId, Params, Rng, Tape, Tensor, Var};

/// Training-time dropout source.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut Rng,
}

fn maybe_dropout(tape: &mut Tape, x: Var, drop: Option<&mut Dropout<'_>>) -> Result<Var> {
    match drop {
        Some(d) if d.rate > 0.0 => tape.dropout(x, d.rate, d.rng),
        _ => Ok(x),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(params: &mut Params, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            weight: params.add_linear_weight(&format!("{name}.w"), fan_in, fan_out, rng)?,
            bias: params.add_filled(&format!("{name}.b"), &[fan_out], 0.0)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var) -> Result<Var> {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut Params, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: params.add_filled(&format!("{name}.gain"), &[dim], 1.0)?,
            bias: params.add_filled(&format!("{name}.bias"), &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var) -> Result<Var> {
        let g = tape.param(params, self.gain);
        let b = tape.param(params, self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Which keys a query position may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMask {
    Full,
    /// Keys `0..=i + right_context` for query `i`; `0` is strictly causal.
    RightContext(usize),
}

impl AttnMask {
    pub fn allowed(&self, queries: usize, keys: usize) -> Option<Vec<bool>> {
        match *self {
            AttnMask::Full => None,
            AttnMask::RightContext(rc) => {
                Some((0..queries * keys).map(|i| i % keys <= i / keys + rc).collect())
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(params: &mut Params, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(contract(format!("{name}: dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(params, &format!("{name}.q"), dim, dim, rng)?,
            key: Linear::new(params, &format!("{name}.k"), dim, dim, rng)?,
            value: Linear::new(params, &format!("{name}.v"), dim, dim, rng)?,
            out: Linear::new(params, &format!("{name}.o"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Params,
        queries: Var,
        memory: Var,
        mask: AttnMask,
    ) -> Result<Var> {
        let q = self.query.forward(tape, params, queries)?;
        let k = self.key.forward(tape, params, memory)?;
        let v = self.value.forward(tape, params, memory)?;
        let (tq, tk) = (tape.value(q).rows(), tape.value(k).rows());
        let allowed = mask.allowed(tq, tk);
        let hd = self.dim / self.heads;
        let scale = 1.0 / crate::numcore::math::sqrt(hd as f64);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (tape.slice_cols(q, h * hd, hd)?, tape.slice_cols(k, h * hd, hd)?, tape.slice_cols(v, h * hd, hd)?)
            };
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let weights = match &allowed {
                Some(a) => tape.masked_softmax_rows(scores, a)?,
                None => tape.softmax_rows(scores)?,
            };
            outs.push(tape.matmul(weights, vh)?);
        }
        let joined = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        self.out.forward(tape, params, joined)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(params: &mut Params, name: &str, dim: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            up: Linear::new(params, &format!("{name}.up"), dim, hidden, rng)?,
            down: Linear::new(params, &format!("{name}.down"), hidden, dim, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, params, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, params, h)
    }
}

/// Pre-norm self-attention + feed-forward block.
#[derive(Clone, Copy, Debug)]
pub struct EncoderLayer {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new(params: &mut Params, name: &str, dim: usize, heads: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            norm_attn: LayerNorm::new(params, &format!("{name}.ln_attn"), dim)?,
            attn: MultiHeadAttention::new(params, &format!("{name}.attn"), dim, heads, rng)?,
            norm_ff: LayerNorm::new(params, &format!("{name}.ln_ff"), dim)?,
            ff: FeedForward::new(params, &format!("{name}.ff"), dim, hidden, rng)?,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Params,
        x: Var,
        mask: AttnMask,
        mut drop: Option<&mut Dropout<'_>>,
    ) -> Result<Var> {
        let n = self.norm_attn.forward(tape, params, x)?;
        let a = self.attn.forward(tape, params, n, n, mask)?;
        let a = maybe_dropout(tape, a, drop.as_deref_mut())?;
        let x = tape.add(x, a)?;
        let n = self.norm_ff.forward(tape, params, x)?;
        let f = self.ff.forward(tape, params, n)?;
        let f = maybe_dropout(tape, f, drop.as_deref_mut())?;
        tape.add(x, f)
    }
}

/// Pre-norm block: full self-attention over text, cross-attention into
/// audio, feed-forward.
#[derive(Clone, Copy, Debug)]
pub struct DecoderLayer {
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderLayer {
    pub fn new(params: &mut Params, name: &str, dim: usize, heads: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            norm_self: LayerNorm::new(params, &format!("{name}.ln_self"), dim)?,
            self_attn: MultiHeadAttention::new(params, &format!("{name}.self_attn"), dim, heads, rng)?,
            norm_cross: LayerNorm::new(params, &format!("{name}.ln_cross"), dim)?,
            cross_attn: MultiHeadAttention::new(params, &format!("{name}.cross_attn"), dim, heads, rng)?,
            norm_ff: LayerNorm::new(params, &format!("{name}.ln_ff"), dim)?,
            ff: FeedForward::new(params, &format!("{name}.ff"), dim, hidden, rng)?,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Params,
        text: Var,
        audio: Var,
        mut drop: Option<&mut Dropout<'_>>,
    ) -> Result<Var> {
        let n = self.norm_self.forward(tape, params, text)?;
        let a = self.self_attn.forward(tape, params, n, n, AttnMask::Full)?;
        let a = maybe_dropout(tape, a, drop.as_deref_mut())?;
        let x = tape.add(text, a)?;
        let n = self.norm_cross.forward(tape, params, x)?;
        let c = self.cross_attn.forward(tape, params, n, audio, AttnMask::Full)?;
        let c = maybe_dropout(tape, c, drop.as_deref_mut())?;
        let x = tape.add(x, c)?;
        let n = self.norm_ff.forward(tape, params, x)?;
        let f = self.ff.forward(tape, params, n)?;
        let f = maybe_dropout(tape, f, drop.as_deref_mut())?;
        tape.add(x, f)
    }
}

/// Absolute sinusoidal position table, `len × dim`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, dim]);
    for pos in 0..len {
        for i in 0..dim {
            let freq = pow(10_000.0, -((i / 2 * 2) as f64) / dim as f64);
            let angle = pos as f64 * freq;
            t.row_mut(pos)[i] = if i % 2 == 0 { sin(angle) } else { cos(angle) };
        }
    }
    t
}

/// Adds the position table to `x`.
pub fn add_positions(tape: &mut Tape, x: Var) -> Result<Var> {
    let (rows, cols) = (tape.value(x).rows(), tape.value(x).cols());
    let pe = tape.constant(sinusoidal_positions(rows, cols));
    tape.add(x, pe)
}

/// Builds an `n × dim` matrix from a list of rows on the tape.
pub fn stack_rows(tape: &mut Tape, rows: &[Var]) -> Result<Var> {
    if rows.len() == 1 {
        return Ok(rows[0]);
    }
    tape.concat_rows(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn right_context_mask_shape() {
        let m = AttnMask::RightContext(1).allowed(3, 4).unwrap();
        assert_eq!(
            m,
            vec![true, true, false, false, true, true, true, false, true, true, true, true]
        );
        assert!(AttnMask::Full.allowed(2, 2).is_none());
    }

    #[test]
    fn positions_are_bounded_and_distinct() {
        let pe = sinusoidal_positions(8, 6);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(pe.row(0)[0], 0.0);
        assert_ne!(pe.row(1), pe.row(2));
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut p = Params::new();
        let mut rng = Rng::new(0);
        assert!(MultiHeadAttention::new(&mut p, "a", 10, 4, &mut rng).is_err());
    }
}
