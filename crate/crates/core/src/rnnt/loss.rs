//! Transducer loss over the `T′ × (U+1)` output lattice.
//!
//! Row `t·(U+1) + u` of the log-probability matrix is the joint output at
//! frame `t` after `u` emitted labels. Blank moves `(t, u) → (t+1, u)`,
//! label `y_{u+1}` moves `(t, u) → (t, u+1)`, and every path ends with the
//! blank at `(T′-1, U)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::align::{LabelSequence, BLANK};
use crate::error::{contract, Result};
use crate::numcore::math::{exp, ln, log_add};
use crate::numcore::{Tape, Tensor, Var};

fn check(log_probs: &Tensor, frames: usize, target: &LabelSequence) -> Result<usize> {
    let (rows, classes) = log_probs.require_matrix("rnnt log_probs")?;
    let u1 = target.len() + 1;
    if frames == 0 || rows != frames * u1 {
        return Err(contract(format!("rnnt lattice has {rows} rows, expected {frames}×{u1}")));
    }
    if let Some(&bad) = target.0.iter().find(|&&l| l == BLANK || l >= classes) {
        return Err(contract(format!("target label {bad} invalid for {classes} classes")));
    }
    Ok(classes)
}

/// Loss and its gradient w.r.t. the lattice log-probabilities.
pub fn rnnt_forward_backward(log_probs: &Tensor, frames: usize, target: &LabelSequence) -> Result<(f64, Vec<f64>)> {
    let classes = check(log_probs, frames, target)?;
    let u1 = target.len() + 1;
    let lp = |t: usize, u: usize, k: usize| log_probs.data()[(t * u1 + u) * classes + k];
    let y = &target.0;
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; frames * u1];
    for t in 0..frames {
        for u in 0..u1 {
            let a = if t == 0 && u == 0 {
                0.0
            } else {
                let from_blank = if t > 0 { alpha[(t - 1) * u1 + u] + lp(t - 1, u, BLANK) } else { ninf };
                let from_label = if u > 0 { alpha[t * u1 + u - 1] + lp(t, u - 1, y[u - 1]) } else { ninf };
                log_add(from_blank, from_label)
            };
            alpha[t * u1 + u] = a;
        }
    }
    let last = frames - 1;
    let log_p = alpha[last * u1 + u1 - 1] + lp(last, u1 - 1, BLANK);

    let mut beta = vec![ninf; frames * u1];
    for t in (0..frames).rev() {
        for u in (0..u1).rev() {
            let b = if t == last && u == u1 - 1 {
                lp(t, u, BLANK)
            } else {
                let via_blank = if t < last { beta[(t + 1) * u1 + u] + lp(t, u, BLANK) } else { ninf };
                let via_label = if u < u1 - 1 { beta[t * u1 + u + 1] + lp(t, u, y[u]) } else { ninf };
                log_add(via_blank, via_label)
            };
            beta[t * u1 + u] = b;
        }
    }

    let mut grad = vec![0.0; frames * u1 * classes];
    for t in 0..frames {
        for u in 0..u1 {
            let a = alpha[t * u1 + u];
            let row = (t * u1 + u) * classes;
            if t < last {
                grad[row + BLANK] = -exp(a + lp(t, u, BLANK) + beta[(t + 1) * u1 + u] - log_p);
            } else if u == u1 - 1 {
                grad[row + BLANK] = -exp(a + lp(t, u, BLANK) - log_p);
            }
            if u < u1 - 1 {
                grad[row + y[u]] = -exp(a + lp(t, u, y[u]) + beta[t * u1 + u + 1] - log_p);
            }
        }
    }
    Ok((-log_p, grad))
}

/// Differentiable transducer loss on the tape.
pub fn rnnt_loss_on_tape(tape: &mut Tape, log_probs: Var, frames: usize, target: &LabelSequence) -> Result<Var> {
    let (loss, grad) = rnnt_forward_backward(tape.value(log_probs), frames, target)?;
    tape.custom_loss(log_probs, loss, grad)
}

/// Largest number of lattice paths the oracle will enumerate.
pub const ORACLE_MAX_PATHS: u128 = 1_000_000;

/// Sums the probability of every monotone lattice path individually.
pub fn rnnt_loss_oracle(log_probs: &Tensor, frames: usize, target: &LabelSequence) -> Result<f64> {
    let classes = check(log_probs, frames, target)?;
    let u = target.len();
    // C(T′-1+U, U) paths: the final blank is fixed.
    let mut paths: u128 = 1;
    for i in 0..u as u128 {
        paths = paths * (frames as u128 - 1 + u as u128 - i) / (i + 1);
    }
    if paths > ORACLE_MAX_PATHS {
        return Err(contract(format!("oracle would enumerate {paths} paths")));
    }
    let u1 = u + 1;
    let lp = |t: usize, uu: usize, k: usize| log_probs.data()[(t * u1 + uu) * classes + k];

    // Each path is a sequence of moves; walk them all explicitly.
    fn walk(t: usize, uu: usize, acc: f64, frames: usize, target: &[usize], lp: &dyn Fn(usize, usize, usize) -> f64) -> f64 {
        let last = frames - 1;
        let mut total = 0.0;
        if t == last && uu == target.len() {
            return exp(acc + lp(t, uu, BLANK));
        }
        if uu < target.len() {
            total += walk(t, uu + 1, acc + lp(t, uu, target[uu]), frames, target, lp);
        }
        if t < last {
            total += walk(t + 1, uu, acc + lp(t, uu, BLANK), frames, target, lp);
        }
        total
    }
    Ok(-ln(walk(0, 0, 0.0, frames, &target.0, &lp)))
}
