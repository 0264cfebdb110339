//! CTC negative log-likelihood over all alignments of a target.
//!
//! The loss is computed by the usual forward recursion over the extended
//! sequence `_ l1 _ l2 _ … lU _` in log space. The backward recursion runs
//! alongside it so the gradient w.r.t. the log-probabilities (the negated
//! state occupancy) is available without differentiating through the DP.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::align::{collapse, Alignment, LabelSequence, Vocab, BLANK};
use crate::error::{contract, Error, Result};
use crate::numcore::math::{exp, ln, log_add, logsumexp_unchecked};
use crate::numcore::{Tape, Tensor, Var};

/// Tolerance on row normalization of CTC inputs.
pub const ROW_NORM_TOL: f64 = 1e-6;

/// Log-probabilities `T × (V+1)` and the target they should explain.
#[derive(Clone, Debug, PartialEq)]
pub struct CtcInstance {
    pub log_probs: Tensor,
    pub target: LabelSequence,
}

impl CtcInstance {
    pub fn new(log_probs: Tensor, target: LabelSequence) -> Result<Self> {
        let (t, n) = log_probs.require_matrix("ctc log_probs")?;
        for r in 0..t {
            let lse = logsumexp_unchecked(log_probs.row(r));
            if (lse).abs() > ROW_NORM_TOL {
                return Err(contract(format!("row {r} is not a log-distribution (logsumexp {lse})")));
            }
        }
        check_target(&target, n)?;
        Ok(Self { log_probs, target })
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.log_probs.cols() - 1)
    }
}

fn check_target(target: &LabelSequence, classes: usize) -> Result<()> {
    if let Some(&bad) = target.0.iter().find(|&&l| l == BLANK || l >= classes) {
        return Err(contract(format!("target label {bad} invalid for {classes} classes")));
    }
    Ok(())
}

/// Loss value and gradient w.r.t. the log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct CtcResult {
    /// `-ln p(target)`; `+inf` when no alignment of length `T` exists.
    pub loss: f64,
    /// `∂loss/∂log_probs`, row-major `T × (V+1)`; zero when infeasible.
    pub grad: Vec<f64>,
}

impl CtcResult {
    pub fn feasible(&self) -> bool {
        self.loss.is_finite()
    }
}

/// Forward-backward over the extended label sequence.
pub fn ctc_forward_backward(log_probs: &Tensor, target: &LabelSequence) -> Result<CtcResult> {
    let (t_len, classes) = log_probs.require_matrix("ctc log_probs")?;
    check_target(target, classes)?;
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &l in &target.0 {
        ext.push(l);
        ext.push(BLANK);
    }
    let s_len = ext.len();
    if t_len < target.min_ctc_frames() {
        return Ok(CtcResult { loss: f64::INFINITY, grad: vec![0.0; t_len * classes] });
    }
    let lp = |t: usize, s: usize| log_probs.data()[t * classes + ext[s]];
    // s -> s-2 skip is allowed into label states that differ from the label two back.
    let can_skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if can_skip(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            cur[s] = if acc == ninf { ninf } else { acc + lp(t, s) };
        }
    }
    let last = (t_len - 1) * s_len;
    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }
    if log_p == ninf {
        return Ok(CtcResult { loss: f64::INFINITY, grad: vec![0.0; t_len * classes] });
    }

    // beta[t][s]: log prob of finishing from state s at frame t, excluding
    // the emission at t itself.
    let mut beta = vec![ninf; t_len * s_len];
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = ninf;
            for next in [s, s + 1, s + 2] {
                if next >= s_len || (next == s + 2 && !can_skip(next)) {
                    continue;
                }
                let b = beta[(t + 1) * s_len + next];
                if b != ninf {
                    acc = log_add(acc, b + lp(t + 1, next));
                }
            }
            beta[t * s_len + s] = acc;
        }
    }

    let mut grad = vec![0.0; t_len * classes];
    for t in 0..t_len {
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a != ninf && b != ninf {
                grad[t * classes + ext[s]] -= exp(a + b - log_p);
            }
        }
    }
    Ok(CtcResult { loss: -log_p, grad })
}

/// Differentiable CTC loss on the tape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CtcLoss {
    /// Scalar node; its value is `+inf` for infeasible instances, which must
    /// not be fed into a backward pass.
    pub loss: Var,
    pub feasible: bool,
}

pub fn ctc_loss(tape: &mut Tape, log_probs: Var, target: &LabelSequence) -> Result<CtcLoss> {
    let res = ctc_forward_backward(tape.value(log_probs), target)?;
    let feasible = res.feasible();
    let loss = tape.custom_loss(log_probs, res.loss, res.grad)?;
    Ok(CtcLoss { loss, feasible })
}

/// Loss value for a standalone instance.
pub fn ctc_loss_value(inst: &CtcInstance) -> Result<f64> {
    Ok(ctc_forward_backward(&inst.log_probs, &inst.target)?.loss)
}

/// Largest `(V+1)^T` the enumeration oracle accepts.
pub const ORACLE_MAX_PATHS: usize = 1_000_000;

/// Sums the probability of every length-`T` token sequence that collapses to
/// the target. Independent of the DP; exponential in `T`.
pub fn ctc_loss_oracle(inst: &CtcInstance) -> Result<f64> {
    let (t_len, classes) = inst.log_probs.require_matrix("ctc log_probs")?;
    let total = (classes as u128).checked_pow(t_len as u32).unwrap_or(u128::MAX);
    if total > ORACLE_MAX_PATHS as u128 {
        return Err(contract(format!("oracle would enumerate {total} paths")));
    }
    let vocab = Vocab::new(classes - 1);
    let mut digits = vec![0usize; t_len];
    let mut prob = 0.0;
    for _ in 0..total {
        let path = Alignment(digits.clone());
        if collapse(&path, vocab)? == inst.target {
            let lp: f64 = digits.iter().enumerate().map(|(t, &k)| inst.log_probs.at(t, k)).sum();
            prob += exp(lp);
        }
        for d in digits.iter_mut().rev() {
            *d += 1;
            if *d < classes {
                break;
            }
            *d = 0;
        }
    }
    Ok(-ln(prob))
}

/// Mean CTC loss over the feasible members of a batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchLoss {
    pub loss: Var,
    pub used: usize,
    pub skipped: usize,
}

pub fn ctc_batch_loss(tape: &mut Tape, items: &[(Var, &LabelSequence)]) -> Result<BatchLoss> {
    let mut kept = Vec::with_capacity(items.len());
    for &(lp, target) in items {
        let l = ctc_loss(tape, lp, target)?;
        if l.feasible {
            kept.push(l.loss);
        }
    }
    if kept.is_empty() {
        return Err(Error::AllInfeasible(items.len()));
    }
    let loss = tape.mean_of(&kept)?;
    Ok(BatchLoss { loss, used: kept.len(), skipped: items.len() - kept.len() })
}
