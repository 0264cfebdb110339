//! Synthetic transduction task.
//!
//! Labels come in confusable pairs `(2i-1, 2i)` whose acoustic prototypes sit
//! close together, while distinct pairs are far apart. The label grammar is
//! a bigram chain in which the two members of a pair lead to disjoint sets
//! of successor pairs, so the *next* label tells which member came before it
//! and the previous one does not. A causal first pass has to guess between
//! pair members from noisy frames; a second pass that reads the whole
//! hypothesis can repair those guesses.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{LabelSequence, Vocab};
use crate::error::{contract, Error, Result};
use crate::numcore::math::{round_to_grid, sqrt};
use crate::numcore::{Rng, Tensor};

/// Generation parameters. Prototypes and the bigram table are derived from
/// these deterministically, so the `TaskSpec` alone regenerates the task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub num_labels: usize,
    pub feature_dim: usize,
    /// Norm of each pair's center prototype.
    pub pair_scale: f64,
    /// Distance of each member from its pair center.
    pub member_offset: f64,
    pub noise_std: f64,
    pub min_duration: usize,
    pub max_duration: usize,
    pub min_length: usize,
    pub max_length: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    /// Seeds the member offset directions.
    pub structure_seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            num_labels: 16,
            feature_dim: 8,
            pair_scale: 2.0,
            member_offset: 0.35,
            noise_std: 0.3,
            min_duration: 2,
            max_duration: 4,
            min_length: 3,
            max_length: 12,
            train_size: 2000,
            dev_size: 200,
            test_size: 200,
            structure_seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    fn code(self) -> u64 {
        self as u64
    }
}

impl core::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| contract(format!("unknown split `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `T′ × F`.
    pub features: Tensor,
    pub target: LabelSequence,
    pub seed: u64,
}

/// A validated spec with its derived prototypes and grammar.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub spec: TaskSpec,
    /// Row `k` is the prototype of label `k`; row 0 (blank) is unused.
    pub prototypes: Vec<Vec<f64>>,
    /// `bigram[a][b]` = P(next = b | current = a), labels `1..=V`.
    pub bigram: Vec<Vec<f64>>,
}

impl TaskSpec {
    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.num_labels)
    }

    pub fn num_pairs(&self) -> usize {
        self.num_labels / 2
    }

    pub fn size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_size,
            Split::Dev => self.dev_size,
            Split::Test => self.test_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| Err(Error::Config { key: format!("task.{key}"), reason });
        if self.num_labels % 2 != 0 || self.num_pairs() < 5 {
            return bad("num_labels", "must be even and at least 10".into());
        }
        if self.feature_dim < self.num_pairs() {
            return bad("feature_dim", format!("must be at least the number of pairs ({})", self.num_pairs()));
        }
        if !(self.pair_scale > 0.0) {
            return bad("pair_scale", "must be positive".into());
        }
        // Members of different pairs must stay further apart than members of
        // one pair: 2·offset < scale·√2 − 2·offset.
        if !(self.member_offset >= 0.0 && 4.0 * self.member_offset < self.pair_scale * sqrt(2.0)) {
            return bad("member_offset", "must be in [0, pair_scale·√2/4)".into());
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std", "must be non-negative".into());
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return bad("min_duration", "need 1 <= min_duration <= max_duration".into());
        }
        if self.min_length == 0 || self.min_length > self.max_length {
            return bad("min_length", "need 1 <= min_length <= max_length".into());
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Task> {
        self.validate()?;
        let v = self.num_labels;
        let f = self.feature_dim;
        let mut rng = Rng::derive(self.structure_seed, &[0x5EED]);
        let mut prototypes = vec![vec![0.0; f]; v + 1];
        for pair in 0..self.num_pairs() {
            let mut dir: Vec<f64> = (0..f).map(|_| rng.normal()).collect();
            let norm = sqrt(dir.iter().map(|x| x * x).sum::<f64>());
            dir.iter_mut().for_each(|x| *x /= norm);
            for (member, sign) in [(2 * pair + 1, -1.0), (2 * pair + 2, 1.0)] {
                let proto = &mut prototypes[member];
                proto[pair] = self.pair_scale;
                for (p, d) in proto.iter_mut().zip(&dir) {
                    *p += sign * self.member_offset * d;
                }
            }
        }
        let pairs = self.num_pairs();
        let mut bigram = vec![vec![0.0; v + 1]; v + 1];
        for pair in 0..pairs {
            for (member, offsets) in [(2 * pair + 1, [1, 2]), (2 * pair + 2, [3, 4])] {
                for off in offsets {
                    let next = (pair + off) % pairs;
                    bigram[member][2 * next + 1] = 0.25;
                    bigram[member][2 * next + 2] = 0.25;
                }
            }
        }
        Ok(Task { spec: self.clone(), prototypes, bigram })
    }
}

impl Task {
    pub fn vocab(&self) -> Vocab {
        self.spec.vocab()
    }

    /// Samples one label sequence from the grammar.
    pub fn sample_labels(&self, rng: &mut Rng) -> LabelSequence {
        let s = &self.spec;
        let len = rng.range_inclusive(s.min_length, s.max_length);
        let mut labels = Vec::with_capacity(len);
        labels.push(rng.range_inclusive(1, s.num_labels));
        while labels.len() < len {
            let prev = *labels.last().expect("non-empty");
            labels.push(rng.categorical(&self.bigram[prev]));
        }
        LabelSequence(labels)
    }

    /// Draws labels, durations and noisy frames for one utterance.
    pub fn utterance(&self, split: Split, index: usize, master_seed: u64) -> Utterance {
        let seed = utterance_seed(master_seed, split, index);
        let mut rng = Rng::new(seed);
        let target = self.sample_labels(&mut rng);
        let s = &self.spec;
        let mut data = Vec::new();
        let mut frames = 0;
        for &label in &target.0 {
            let dur = rng.range_inclusive(s.min_duration, s.max_duration);
            for _ in 0..dur {
                data.extend(self.prototypes[label].iter().map(|p| p + s.noise_std * rng.normal()));
            }
            frames += dur;
        }
        let features = Tensor::new(&[frames, s.feature_dim], data).expect("non-empty utterance");
        Utterance { id: format!("{}-{index}", split.name()), features, target, seed }
    }
}

/// Seed of utterance `index` in `split`; independent of every other
/// utterance, so any one can be regenerated alone.
pub fn utterance_seed(master_seed: u64, split: Split, index: usize) -> u64 {
    crate::numcore::derive_seed(master_seed, &[split.code(), index as u64])
}

pub fn generate_corpus(task: &Task, split: Split, n: usize, master_seed: u64) -> Result<Vec<Utterance>> {
    if n == 0 {
        return Err(contract("corpus size must be at least 1"));
    }
    Ok((0..n).map(|i| task.utterance(split, i, master_seed)).collect())
}

/// Hash of the empty corpus.
pub const EMPTY_CORPUS_HASH: &str = "e3b0c44298fc1c14";

/// Order-sensitive content hash: ids, targets and features on a `1e-9` grid.
/// First 8 bytes of SHA-256, as hex.
pub fn corpus_hash(corpus: &[Utterance]) -> String {
    let mut h = Sha256::new();
    for u in corpus {
        h.update((u.id.len() as u64).to_le_bytes());
        h.update(u.id.as_bytes());
        h.update((u.target.len() as u64).to_le_bytes());
        for &t in &u.target.0 {
            h.update((t as u64).to_le_bytes());
        }
        h.update((u.features.rows() as u64).to_le_bytes());
        h.update((u.features.cols() as u64).to_le_bytes());
        for &x in u.features.data() {
            h.update(round_to_grid(x, 1e-9).to_le_bytes());
        }
    }
    let digest = h.finalize();
    let mut out = String::with_capacity(16);
    for b in &digest[..8] {
        let _ = write!(out, "{b:02x}");
    }
    out
}
