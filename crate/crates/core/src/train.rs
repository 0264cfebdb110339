//! Training loops for both passes and corpus evaluation.
//!
//! Batches are lists of utterances, each with its own subgraph on a shared
//! tape; the batch loss is the mean over utterances, so no padding exists.
//! Everything here is deterministic given the experiment seed. Wall-clock
//! timing is left to the caller.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{edit_distance, Alignment, EditCounts, LabelSequence};
use crate::error::{Error, Result};
use crate::numcore::{Adam, AdamConfig, Params, Rng, RngState, Tape, Tensor, Var};
use crate::refiner::{RefineConfig, Refiner};
use crate::rnnt::{spec_augment, FirstPassConfig, FirstPassModel, SpecAugmentConfig};
use crate::layers::Dropout;
use crate::synth::{TaskSpec, Utterance};

/// Optimization schedule for one pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    /// Evaluate on dev every this many steps.
    pub eval_every: usize,
    /// Stop after this many evaluations without a new best dev loss.
    pub patience: usize,
    pub optimizer: AdamConfig,
    pub spec_augment: SpecAugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            max_steps: 2000,
            eval_every: 100,
            patience: 10,
            optimizer: AdamConfig::default(),
            spec_augment: SpecAugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    fn validate(&self, section: &str) -> Result<()> {
        let bad = |key: &str, reason: &str| Err(Error::Config { key: format!("{section}.{key}"), reason: reason.into() });
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be at least 1");
        }
        if !(self.optimizer.lr > 0.0) {
            return bad("optimizer.lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.optimizer.beta1) || !(0.0..1.0).contains(&self.optimizer.beta2) {
            return bad("optimizer.beta1", "betas must be in [0, 1)");
        }
        let sa = &self.spec_augment;
        if !(0.0..=1.0).contains(&sa.max_time_frac) || !(0.0..=1.0).contains(&sa.max_feat_frac) {
            return bad("spec_augment.max_time_frac", "fractions must be in [0, 1]");
        }
        Ok(())
    }
}

/// Every knob of one experiment, resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: TaskSpec,
    pub first_pass: FirstPassConfig,
    pub refiner: RefineConfig,
    pub first_pass_training: TrainConfig,
    pub refiner_training: TrainConfig,
    /// First-pass beam for producing `A⁰`, in training and evaluation.
    pub beam_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let task = TaskSpec::default();
        let train = TrainConfig { optimizer: AdamConfig { lr: 2e-3, ..AdamConfig::default() }, ..TrainConfig::default() };
        Self {
            seed: 7,
            first_pass: FirstPassConfig {
                feature_dim: task.feature_dim,
                num_labels: task.num_labels,
                dim: 32,
                layers: 2,
                heads: 4,
                ffn_hidden: 64,
                max_emit_per_frame: 4,
                dropout: 0.0,
            },
            task,
            refiner: RefineConfig::default(),
            first_pass_training: TrainConfig { eval_every: 200, ..train.clone() },
            refiner_training: TrainConfig { eval_every: 250, ..train },
            beam_size: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.first_pass.validate()?;
        self.refiner.validate()?;
        self.first_pass_training.validate("first_pass_training")?;
        self.refiner_training.validate("refiner_training")?;
        let bad = |key: &str, reason: &str| Err(Error::Config { key: key.into(), reason: reason.into() });
        if self.first_pass.feature_dim != self.task.feature_dim {
            return bad("first_pass.feature_dim", "must equal task.feature_dim");
        }
        if self.first_pass.num_labels != self.task.num_labels {
            return bad("first_pass.num_labels", "must equal task.num_labels");
        }
        if self.beam_size == 0 {
            return bad("beam_size", "must be at least 1");
        }
        Ok(())
    }
}

/// One evaluation record. WERs are percentages over the whole split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub split: String,
    pub loss: f64,
    pub wer_first: f64,
    /// WER after refinement steps `1..=R`; empty for first-pass rows.
    pub wer_steps: Vec<f64>,
    pub skips: usize,
}

/// Training result with the schedule position at the end.
#[derive(Clone, Debug)]
pub struct Trained<M> {
    pub model: M,
    pub rng: RngState,
    pub steps: usize,
    pub best_step: usize,
    pub rows: Vec<MetricsRow>,
}

/// Sink for evaluation rows as they are produced.
pub trait Observer {
    fn on_eval(&mut self, row: &MetricsRow);
    fn on_step(&mut self, _step: usize, _loss: f64) {}
}

impl Observer for () {
    fn on_eval(&mut self, _row: &MetricsRow) {}
}

impl<F: FnMut(&MetricsRow)> Observer for F {
    fn on_eval(&mut self, row: &MetricsRow) {
        self(row)
    }
}

/// Stage ids keep each pass's random streams disjoint.
const STAGE_FIRST_PASS: u64 = 1;
const STAGE_REFINER: u64 = 2;

/// Epoch-wise shuffled utterance order.
struct Batches {
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
}

impl Batches {
    fn new(n: usize, seed: u64) -> Self {
        let mut b = Self { order: (0..n).collect(), pos: 0, epoch: 0, seed };
        b.shuffle();
        b
    }

    fn shuffle(&mut self) {
        let mut rng = Rng::derive(self.seed, &[self.epoch]);
        for i in (1..self.order.len()).rev() {
            let j = rng.range_inclusive(0, i);
            self.order.swap(i, j);
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.pos = 0;
                self.epoch += 1;
                self.shuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn check_finite(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step, reason: format!("loss is {loss}") })
    }
}

fn require_data(train: &[Utterance], dev: &[Utterance]) -> Result<()> {
    if train.is_empty() || dev.is_empty() {
        return Err(crate::error::contract("training needs non-empty train and dev sets"));
    }
    Ok(())
}

/// Early-stopping bookkeeping shared by both loops.
struct Stopper {
    best: f64,
    best_step: usize,
    best_params: Option<Params>,
    stale: usize,
    patience: usize,
}

impl Stopper {
    fn new(patience: usize) -> Self {
        Self { best: f64::INFINITY, best_step: 0, best_params: None, stale: 0, patience }
    }

    /// Records a dev loss; returns `true` when training should stop.
    fn record(&mut self, step: usize, dev_loss: f64, params: &Params) -> bool {
        if dev_loss < self.best {
            self.best = dev_loss;
            self.best_step = step;
            self.best_params = Some(params.clone());
            self.stale = 0;
            false
        } else {
            self.stale += 1;
            self.stale > self.patience
        }
    }
}

/// Mean transducer loss over a split without augmentation.
pub fn first_pass_loss(model: &FirstPassModel, corpus: &[Utterance]) -> Result<f64> {
    let mut total = 0.0;
    for u in corpus {
        let mut tape = Tape::new();
        let l = model.loss(&mut tape, &u.features, &u.target, None)?;
        total += tape.value(l).item();
    }
    Ok(total / corpus.len() as f64)
}

/// Trains the first pass with the transducer loss and early stopping.
pub fn train_first_pass(
    cfg: &ExperimentConfig,
    train: &[Utterance],
    dev: &[Utterance],
    observer: &mut dyn Observer,
) -> Result<Trained<FirstPassModel>> {
    cfg.validate()?;
    require_data(train, dev)?;
    let tc = &cfg.first_pass_training;
    let mut model = FirstPassModel::new(cfg.first_pass.clone(), cfg.seed)?;
    let mut adam = Adam::new(&model.params);
    let mut rng = Rng::derive(cfg.seed, &[STAGE_FIRST_PASS]);
    let mut batches = Batches::new(train.len(), rng.next_u64());
    let mut stop = Stopper::new(tc.patience);
    let mut rows = Vec::new();
    let mut step = 0;
    while step < tc.max_steps {
        let batch = batches.next(tc.batch_size);
        let mut tape = Tape::new();
        let mut losses: Vec<Var> = Vec::with_capacity(batch.len());
        let mut drop_rng = rng.fork();
        for &i in &batch {
            let u = &train[i];
            let feats = spec_augment(&u.features, &tc.spec_augment, &mut rng);
            let mut d = Dropout { rate: cfg.first_pass.dropout, rng: &mut drop_rng };
            losses.push(model.loss(&mut tape, &feats, &u.target, Some(&mut d))?);
        }
        let loss = tape.mean_of(&losses)?;
        let value = tape.value(loss).item();
        check_finite(step, value)?;
        tape.backward(loss, &mut model.params)?;
        adam.update(&mut model.params, &tc.optimizer);
        step += 1;
        observer.on_step(step, value);
        if step % tc.eval_every == 0 || step == tc.max_steps {
            let dev_loss = first_pass_loss(&model, dev)?;
            check_finite(step, dev_loss)?;
            let eval = evaluate(&model, None, dev, 0, cfg.beam_size)?;
            let row = MetricsRow { step, split: "dev".into(), loss: dev_loss, wer_first: eval.wer_first(), wer_steps: Vec::new(), skips: 0 };
            observer.on_eval(&row);
            rows.push(row);
            if stop.record(step, dev_loss, &model.params) {
                break;
            }
        }
    }
    if let Some(best) = stop.best_params.take() {
        model.params = best;
    }
    Ok(Trained { model, rng: rng.state(), steps: step, best_step: stop.best_step, rows })
}

/// Top first-pass hypothesis and the encoder output it was decoded from.
pub fn first_pass_alignment(model: &FirstPassModel, features: &Tensor, beam: usize) -> Result<(Tensor, Alignment, LabelSequence)> {
    let enc = model.encode_causal(features)?;
    let scorer = model.scorer(&enc)?;
    let best = crate::rnnt::beam_search(&scorer, beam, model.cfg.max_emit_per_frame)?
        .into_iter()
        .next()
        .ok_or_else(|| crate::error::contract("beam search returned nothing"))?;
    Ok((enc, best.alignment, best.labels))
}

/// First-pass result for one utterance. Fixed once the first pass is frozen,
/// so dev-set evaluation during refiner training computes it once.
#[derive(Clone, Debug)]
pub struct FirstPassOutput {
    pub encoding: Tensor,
    pub alignment: Alignment,
    pub labels: LabelSequence,
}

pub fn first_pass_outputs(first: &FirstPassModel, corpus: &[Utterance], beam: usize) -> Result<Vec<FirstPassOutput>> {
    corpus
        .iter()
        .map(|u| {
            let (encoding, alignment, labels) = first_pass_alignment(first, &u.features, beam)?;
            Ok(FirstPassOutput { encoding, alignment, labels })
        })
        .collect()
}

/// Mean refinement loss on a split with masking and dropout off.
pub fn refiner_loss(first: &FirstPassModel, refiner: &Refiner, corpus: &[Utterance], beam: usize) -> Result<(f64, usize)> {
    refiner_loss_on(refiner, corpus, &first_pass_outputs(first, corpus, beam)?)
}

fn refiner_loss_on(refiner: &Refiner, corpus: &[Utterance], fp: &[FirstPassOutput]) -> Result<(f64, usize)> {
    let clean = Refiner { cfg: RefineConfig { mask_prob: 0.0, dropout: 0.0, ..refiner.cfg.clone() }, ..refiner.clone() };
    let mut total = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    for (u, o) in corpus.iter().zip(fp) {
        let mut tape = Tape::new();
        match clean.refine_train_loss(&mut tape, &o.encoding, &o.alignment, &u.target, &mut Rng::new(0))? {
            Some(l) => {
                total += tape.value(l.loss).item();
                used += 1;
            }
            None => skipped += 1,
        }
    }
    let mean = if used == 0 { f64::INFINITY } else { total / used as f64 };
    Ok((mean, skipped))
}

/// Trains the refiner on alignments from a frozen first pass.
pub fn train_refiner(
    cfg: &ExperimentConfig,
    first: &FirstPassModel,
    train: &[Utterance],
    dev: &[Utterance],
    observer: &mut dyn Observer,
) -> Result<Trained<Refiner>> {
    cfg.validate()?;
    require_data(train, dev)?;
    let tc = &cfg.refiner_training;
    let mut refiner = Refiner::new(cfg.refiner.clone(), first.cfg.dim, first.vocab(), cfg.seed)?;
    let mut adam = Adam::new(&refiner.params);
    let mut rng = Rng::derive(cfg.seed, &[STAGE_REFINER]);
    let mut batches = Batches::new(train.len(), rng.next_u64());
    let mut stop = Stopper::new(tc.patience);
    let mut rows = Vec::new();
    let mut step = 0;
    let mut skips = 0;
    let dev_fp = first_pass_outputs(first, dev, cfg.beam_size)?;
    while step < tc.max_steps {
        let batch = batches.next(tc.batch_size);
        let mut tape = Tape::new();
        let mut losses = Vec::with_capacity(batch.len());
        for &i in &batch {
            let u = &train[i];
            let feats = spec_augment(&u.features, &tc.spec_augment, &mut rng);
            let (h0, a0, _) = first_pass_alignment(first, &feats, cfg.beam_size)?;
            match refiner.refine_train_loss(&mut tape, &h0, &a0, &u.target, &mut rng)? {
                Some(l) => losses.push(l.loss),
                None => skips += 1,
            }
        }
        step += 1;
        if !losses.is_empty() {
            let loss = tape.mean_of(&losses)?;
            let value = tape.value(loss).item();
            check_finite(step, value)?;
            tape.backward(loss, &mut refiner.params)?;
            adam.update(&mut refiner.params, &tc.optimizer);
            observer.on_step(step, value);
        }
        if step % tc.eval_every == 0 || step == tc.max_steps {
            let (dev_loss, _) = refiner_loss_on(&refiner, dev, &dev_fp)?;
            check_finite(step, dev_loss)?;
            let eval = evaluate_on(Some(&refiner), dev, &dev_fp, refiner.cfg.infer_steps)?;
            let row = MetricsRow {
                step,
                split: "dev".into(),
                loss: dev_loss,
                wer_first: eval.wer_first(),
                wer_steps: eval.wer_steps(),
                skips,
            };
            observer.on_eval(&row);
            rows.push(row);
            if stop.record(step, dev_loss, &refiner.params) {
                break;
            }
        }
    }
    if let Some(best) = stop.best_params.take() {
        refiner.params = best;
    }
    Ok(Trained { model: refiner, rng: rng.state(), steps: step, best_step: stop.best_step, rows })
}

/// Decodes of one utterance by both passes.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceDecode {
    pub first: LabelSequence,
    pub first_alignment: Alignment,
    pub steps: Vec<LabelSequence>,
    pub step_alignments: Vec<Alignment>,
}

pub fn decode_utterance(
    first: &FirstPassModel,
    refiner: Option<&Refiner>,
    features: &Tensor,
    steps: usize,
    beam: usize,
) -> Result<UtteranceDecode> {
    let (encoding, alignment, labels) = first_pass_alignment(first, features, beam)?;
    refine_output(refiner, FirstPassOutput { encoding, alignment, labels }, steps)
}

fn refine_output(refiner: Option<&Refiner>, fp: FirstPassOutput, steps: usize) -> Result<UtteranceDecode> {
    let (steps, step_alignments) = match refiner {
        Some(r) if steps > 0 => {
            let out = r.refine_decode(&fp.encoding, &fp.alignment, steps)?;
            (out.per_step, out.alignments)
        }
        _ => (Vec::new(), Vec::new()),
    };
    Ok(UtteranceDecode { first: fp.labels, first_alignment: fp.alignment, steps, step_alignments })
}

/// Edit counts per column, summed over a split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Evaluation {
    pub ref_tokens: usize,
    pub first: EditCounts,
    pub steps: Vec<EditCounts>,
    pub decodes: Vec<UtteranceDecode>,
}

impl Evaluation {
    fn percent(&self, c: &EditCounts) -> f64 {
        100.0 * c.total() as f64 / self.ref_tokens.max(1) as f64
    }

    pub fn wer_first(&self) -> f64 {
        self.percent(&self.first)
    }

    pub fn wer_steps(&self) -> Vec<f64> {
        self.steps.iter().map(|c| self.percent(c)).collect()
    }

    /// Adds one utterance's decode; callers merge in corpus order.
    pub fn push(&mut self, target: &LabelSequence, d: UtteranceDecode) {
        self.ref_tokens += target.len();
        self.first += edit_distance(target, &d.first);
        if self.steps.len() < d.steps.len() {
            self.steps.resize(d.steps.len(), EditCounts::default());
        }
        for (acc, hyp) in self.steps.iter_mut().zip(&d.steps) {
            *acc += edit_distance(target, hyp);
        }
        self.decodes.push(d);
    }
}

/// First-pass WER and WER after each of `steps` refinement steps.
pub fn evaluate(
    first: &FirstPassModel,
    refiner: Option<&Refiner>,
    corpus: &[Utterance],
    steps: usize,
    beam: usize,
) -> Result<Evaluation> {
    let mut eval = Evaluation::default();
    for u in corpus {
        eval.push(&u.target, decode_utterance(first, refiner, &u.features, steps, beam)?);
    }
    Ok(eval)
}

fn evaluate_on(refiner: Option<&Refiner>, corpus: &[Utterance], fp: &[FirstPassOutput], steps: usize) -> Result<Evaluation> {
    let mut eval = Evaluation::default();
    for (u, o) in corpus.iter().zip(fp) {
        eval.push(&u.target, refine_output(refiner, o.clone(), steps)?);
    }
    Ok(eval)
}

/// Content fingerprint of a parameter store: names, shapes and value bits.
pub fn params_fingerprint(params: &Params) -> String {
    let mut h = Sha256::new();
    for id in params.ids_by_name() {
        let p = params.get(id);
        h.update(p.name.as_bytes());
        h.update([0]);
        for &d in p.value.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &x in p.value.data() {
            h.update(x.to_bits().to_le_bytes());
        }
    }
    let mut out = String::with_capacity(64);
    for b in h.finalize() {
        let _ = write!(out, "{b:02x}");
    }
    out
}

#[cfg(test)]
mod tests;
