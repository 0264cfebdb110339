//! Alignment algebra: vocabulary layout, the collapse operator, greedy
//! alignment extraction, mask augmentation and edit distance.
//!
//! Token ids: `0` is blank, `1..=V` are labels, `V + 1` is the mask token.
//! Model outputs have `V + 1` classes, so the mask can be embedded but never
//! predicted.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numcore::{Rng, Tensor};

pub const BLANK: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub num_labels: usize,
}

impl Vocab {
    pub fn new(num_labels: usize) -> Self {
        Self { num_labels }
    }

    pub fn blank(&self) -> usize {
        BLANK
    }

    pub fn mask(&self) -> usize {
        self.num_labels + 1
    }

    /// Softmax width: labels plus blank.
    pub fn output_size(&self) -> usize {
        self.num_labels + 1
    }

    /// Embedding table rows: labels, blank and mask.
    pub fn embed_size(&self) -> usize {
        self.num_labels + 2
    }

    pub fn is_label(&self, id: usize) -> bool {
        (1..=self.num_labels).contains(&id)
    }
}

/// Frame-indexed token sequence, blanks included.
#[derive(Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Alignment(pub Vec<usize>);

/// Blank-free, mask-free label sequence.
#[derive(Clone, PartialEq, Eq, Hash, Default, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabelSequence(pub Vec<usize>);

impl Alignment {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn count_blanks(&self) -> usize {
        self.0.iter().filter(|&&t| t == BLANK).count()
    }
}

impl LabelSequence {
    /// Checks that every id is a real label.
    pub fn new(tokens: Vec<usize>, vocab: Vocab) -> Result<Self> {
        if let Some(&bad) = tokens.iter().find(|&&t| !vocab.is_label(t)) {
            return Err(contract(format!("label id {bad} outside 1..={}", vocab.num_labels)));
        }
        Ok(Self(tokens))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    /// Minimum number of frames a CTC alignment of this sequence needs:
    /// one per label plus a blank between each adjacent repeat.
    pub fn min_ctc_frames(&self) -> usize {
        self.0.len() + self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }
}

/// Merges adjacent repeats, then drops blanks.
pub fn collapse(a: &Alignment, vocab: Vocab) -> Result<LabelSequence> {
    let mut out = Vec::new();
    let mut prev = None;
    for &t in &a.0 {
        if t > vocab.num_labels {
            return Err(contract(format!("token {t} cannot be collapsed (mask or out of range)")));
        }
        if Some(t) != prev && t != BLANK {
            out.push(t);
        }
        prev = Some(t);
    }
    Ok(LabelSequence(out))
}

/// Position-wise argmax over `T × (V+1)` scores; ties go to the lowest id.
pub fn greedy_alignment(scores: &Tensor) -> Result<Alignment> {
    let (t, n) = scores.require_matrix("greedy_alignment")?;
    if t == 0 || n == 0 {
        return Err(contract("greedy_alignment of an empty matrix"));
    }
    Ok(Alignment((0..t).map(|r| argmax(scores.row(r))).collect()))
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Replaces each position by the mask token with probability `p`.
///
/// Draws exactly one uniform per position, so the generator advances by the
/// alignment length regardless of `p`.
pub fn mask_augment(a: &Alignment, p: f64, vocab: Vocab, rng: &mut Rng) -> Result<Alignment> {
    if !(0.0..=1.0).contains(&p) {
        return Err(contract(format!("mask probability {p} outside [0, 1]")));
    }
    let mask = vocab.mask();
    Ok(Alignment(a.0.iter().map(|&t| if rng.uniform() < p { mask } else { t }).collect()))
}

/// Edit operation counts between a reference and a hypothesis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub subs: usize,
    pub ins: usize,
    pub dels: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.subs + self.ins + self.dels
    }

    /// Error rate in percent; an empty reference counts against a length of 1.
    pub fn wer(&self, ref_len: usize) -> f64 {
        100.0 * self.total() as f64 / ref_len.max(1) as f64
    }
}

impl core::ops::AddAssign for EditCounts {
    fn add_assign(&mut self, o: Self) {
        self.subs += o.subs;
        self.ins += o.ins;
        self.dels += o.dels;
    }
}

/// One step of a minimal edit script.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditOp {
    Match { r: usize, h: usize },
    Sub { r: usize, h: usize },
    Ins { h: usize },
    Del { r: usize },
}

/// Unit-cost Levenshtein alignment with backtrace preference
/// substitution/match, then deletion, then insertion.
pub fn edit_script(reference: &[usize], hyp: &[usize]) -> Vec<EditOp> {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = diag.min(del).min(ins);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                ops.push(if same { EditOp::Match { r: i - 1, h: j - 1 } } else { EditOp::Sub { r: i - 1, h: j - 1 } });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            ops.push(EditOp::Del { r: i - 1 });
            i -= 1;
        } else {
            ops.push(EditOp::Ins { h: j - 1 });
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

pub fn edit_distance(reference: &LabelSequence, hyp: &LabelSequence) -> EditCounts {
    let mut c = EditCounts::default();
    for op in edit_script(&reference.0, &hyp.0) {
        match op {
            EditOp::Match { .. } => {}
            EditOp::Sub { .. } => c.subs += 1,
            EditOp::Ins { .. } => c.ins += 1,
            EditOp::Del { .. } => c.dels += 1,
        }
    }
    c
}

/// Text form: space-separated ids, blank as `_`, mask as `?`.
pub fn format_tokens(tokens: &[usize], vocab: Vocab) -> String {
    let mut s = String::new();
    for (i, &t) in tokens.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        if t == BLANK {
            s.push('_');
        } else if t == vocab.mask() {
            s.push('?');
        } else {
            s.push_str(&format!("{t}"));
        }
    }
    s
}

/// Inverse of [`format_tokens`].
pub fn parse_tokens(text: &str, vocab: Vocab) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|w| match w {
            "_" => Ok(BLANK),
            "?" => Ok(vocab.mask()),
            _ => w
                .parse::<usize>()
                .ok()
                .filter(|&t| t <= vocab.num_labels)
                .ok_or_else(|| contract(format!("bad token `{w}`"))),
        })
        .collect()
}

impl fmt::Debug for Alignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Alignment{:?}", self.0)
    }
}

impl fmt::Debug for LabelSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Labels{:?}", self.0)
    }
}
