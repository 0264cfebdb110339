//! File-level pipeline stages shared by the CLI, the ablation runner and
//! the integration tests.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use alignrefine_core::refiner::Refiner;
use alignrefine_core::rnnt::FirstPassModel;
use alignrefine_core::synth::{corpus_hash, generate_corpus, Split, Utterance};
use alignrefine_core::train::{
    decode_utterance, first_pass_loss, refiner_loss, train_first_pass, train_refiner, Evaluation, ExperimentConfig,
    MetricsRow, Trained,
};
use anyhow::{bail, Context};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{self, invalid};
use crate::corpus_io;
use crate::metrics::{MetricsWriter, WallClock};

pub const FIRST_PASS: &str = "first_pass";
pub const REFINER: &str = "refiner";

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Write `0` in the wall-time column so metrics files compare bitwise.
    pub fixed_wall_time: bool,
    /// Worker threads for evaluation.
    pub threads: usize,
    /// Print evaluation rows to stderr as they arrive.
    pub verbose: bool,
}

impl RunOptions {
    /// Thread count from `AR_THREADS`, default 1.
    pub fn threads_from_env() -> usize {
        std::env::var("AR_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&n| n >= 1).unwrap_or(1)
    }
}

/// Generates train, dev and test corpora into `out`; returns `(split, size, hash)`.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<Vec<(Split, usize, String)>> {
    cfg.task.validate()?;
    let task = cfg.task.build()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut report = Vec::new();
    for split in Split::ALL {
        let utts = generate_corpus(&task, split, cfg.task.size(split), cfg.seed)?;
        corpus_io::save(&corpus_io::corpus_path(out, split), &cfg.task, split, cfg.seed, &utts)?;
        report.push((split, utts.len(), corpus_hash(&utts)));
    }
    write_config(out, cfg)?;
    Ok(report)
}

pub fn write_config(dir: &Path, cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join("config.toml");
    std::fs::write(&path, config::to_toml(cfg))?;
    Ok(path)
}

/// Loads one split and checks that it was generated from the configured task.
pub fn load_split(data: &Path, split: Split, cfg: &ExperimentConfig) -> anyhow::Result<Vec<Utterance>> {
    let corpus = corpus_io::load(&corpus_io::corpus_path(data, split))?;
    if corpus.header.task != cfg.task {
        return Err(invalid("task", format!("{} split was generated from a different task spec", split.name())));
    }
    Ok(corpus.utterances)
}

fn metrics_file(path: &Path, refine_steps: usize, opts: &RunOptions) -> anyhow::Result<MetricsWriter<BufWriter<File>>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(MetricsWriter::new(BufWriter::new(f), refine_steps, WallClock::start(opts.fixed_wall_time))?)
}

/// Observer that streams rows to a CSV file, remembering the first I/O error.
fn csv_observer<'a>(
    w: &'a mut MetricsWriter<BufWriter<File>>,
    err: &'a mut Option<std::io::Error>,
    tag: &'a str,
    verbose: bool,
) -> impl FnMut(&MetricsRow) + 'a {
    move |row: &MetricsRow| {
        if verbose {
            eprintln!("[{tag}] step {} loss {:.4} wer_first {:.2} steps {:?}", row.step, row.loss, row.wer_first, row.wer_steps);
        }
        if err.is_none() {
            if let Err(e) = w.write(row) {
                *err = Some(e);
            }
        }
    }
}

/// Trains the first pass on `data`, writing `<out>/first_pass.*` and
/// `<out>/first_pass_metrics.csv`.
pub fn run_first_pass(cfg: &ExperimentConfig, data: &Path, out: &Path, opts: &RunOptions) -> anyhow::Result<Trained<FirstPassModel>> {
    cfg.validate()?;
    let train = load_split(data, Split::Train, cfg)?;
    let dev = load_split(data, Split::Dev, cfg)?;
    write_config(out, cfg)?;
    let mut w = metrics_file(&out.join("first_pass_metrics.csv"), 0, opts)?;
    let mut io_err = None;
    let trained = train_first_pass(cfg, &train, &dev, &mut csv_observer(&mut w, &mut io_err, FIRST_PASS, opts.verbose))?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    save_model(&out.join(FIRST_PASS), cfg, &trained.model.params, trained.best_step, trained.rng)?;
    Ok(trained)
}

/// Trains the refiner against a frozen first pass, writing `<out>/refiner.*`
/// and `<out>/refiner_metrics.csv`.
pub fn run_refiner(
    cfg: &ExperimentConfig,
    first: &FirstPassModel,
    data: &Path,
    out: &Path,
    opts: &RunOptions,
) -> anyhow::Result<Trained<Refiner>> {
    cfg.validate()?;
    check_first_pass(cfg, first)?;
    let train = load_split(data, Split::Train, cfg)?;
    let dev = load_split(data, Split::Dev, cfg)?;
    write_config(out, cfg)?;
    let mut w = metrics_file(&out.join("refiner_metrics.csv"), cfg.refiner.infer_steps, opts)?;
    let mut io_err = None;
    let trained = train_refiner(cfg, first, &train, &dev, &mut csv_observer(&mut w, &mut io_err, REFINER, opts.verbose))?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    save_model(&out.join(REFINER), cfg, &trained.model.params, trained.best_step, trained.rng)?;
    Ok(trained)
}

fn check_first_pass(cfg: &ExperimentConfig, first: &FirstPassModel) -> anyhow::Result<()> {
    if first.cfg != cfg.first_pass {
        return Err(invalid("first_pass", "config does not match the first-pass checkpoint"));
    }
    Ok(())
}

fn save_model(
    prefix: &Path,
    cfg: &ExperimentConfig,
    params: &alignrefine_core::numcore::Params,
    step: usize,
    rng: alignrefine_core::numcore::RngState,
) -> anyhow::Result<()> {
    checkpoint::save(prefix, &Checkpoint { params: params.clone(), step, config: config::to_toml(cfg), rng })
}

/// First-pass model and the config it was trained with.
pub fn load_first_pass(prefix: &Path) -> anyhow::Result<(ExperimentConfig, FirstPassModel, usize)> {
    let ck = checkpoint::load(prefix)?;
    let cfg = config::parse(&ck.config).context("config stored in first-pass checkpoint")?;
    let mut model = FirstPassModel::new(cfg.first_pass.clone(), cfg.seed)?;
    checkpoint::restore(&mut model.params, &ck.params)?;
    Ok((cfg, model, ck.step))
}

pub fn load_refiner(prefix: &Path, first: &FirstPassModel) -> anyhow::Result<(ExperimentConfig, Refiner, usize)> {
    let ck = checkpoint::load(prefix)?;
    let cfg = config::parse(&ck.config).context("config stored in refiner checkpoint")?;
    let mut r = Refiner::new(cfg.refiner.clone(), first.cfg.dim, first.vocab(), cfg.seed)?;
    checkpoint::restore(&mut r.params, &ck.params)?;
    Ok((cfg, r, ck.step))
}

/// Corpus evaluation spread over `threads` workers; results are merged in
/// corpus order, so the output does not depend on the thread count.
pub fn evaluate_parallel(
    first: &FirstPassModel,
    refiner: Option<&Refiner>,
    corpus: &[Utterance],
    steps: usize,
    beam: usize,
    threads: usize,
) -> anyhow::Result<Evaluation> {
    let threads = threads.clamp(1, corpus.len().max(1));
    let chunk = corpus.len().div_ceil(threads).max(1);
    let decodes = std::thread::scope(|s| {
        let handles: Vec<_> = corpus
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter().map(|u| decode_utterance(first, refiner, &u.features, steps, beam)).collect::<Result<Vec<_>, _>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect::<Result<Vec<_>, _>>()
    })?;
    let mut eval = Evaluation::default();
    for (u, d) in corpus.iter().zip(decodes.into_iter().flatten()) {
        eval.push(&u.target, d);
    }
    Ok(eval)
}

/// One metrics row for a split: losses from the deepest model given and WER
/// for the first pass and each refinement step.
pub fn evaluation_row(
    first: &FirstPassModel,
    refiner: Option<&Refiner>,
    corpus: &[Utterance],
    split: Split,
    step: usize,
    steps: usize,
    beam: usize,
    threads: usize,
) -> anyhow::Result<MetricsRow> {
    if refiner.is_none() && steps > 0 {
        bail!("refinement steps requested without a refiner");
    }
    let eval = evaluate_parallel(first, refiner, corpus, steps, beam, threads)?;
    let (loss, skips) = match refiner {
        Some(r) => refiner_loss(first, r, corpus, beam)?,
        None => (first_pass_loss(first, corpus)?, 0),
    };
    Ok(MetricsRow { step, split: split.name().into(), loss, wer_first: eval.wer_first(), wer_steps: eval.wer_steps(), skips })
}

/// Writes a single-row metrics CSV.
pub fn write_rows(path: &Path, rows: &[MetricsRow], refine_steps: usize, opts: &RunOptions) -> anyhow::Result<()> {
    let mut w = metrics_file(path, refine_steps, opts)?;
    for r in rows {
        w.write(r)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alignrefine_core::train::evaluate;

    #[test]
    fn parallel_evaluation_matches_sequential() {
        let mut cfg = ExperimentConfig::default();
        cfg.first_pass.dim = 8;
        cfg.first_pass.heads = 2;
        cfg.first_pass.layers = 1;
        let task = cfg.task.build().unwrap();
        let dev = generate_corpus(&task, Split::Dev, 7, 3).unwrap();
        let first = FirstPassModel::new(cfg.first_pass.clone(), 1).unwrap();
        let seq = evaluate(&first, None, &dev, 0, 2).unwrap();
        for threads in [1, 2, 3, 16] {
            assert_eq!(evaluate_parallel(&first, None, &dev, 0, 2, threads).unwrap(), seq);
        }
    }

    #[test]
    fn mismatched_task_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.task.train_size = 3;
        cfg.task.dev_size = 2;
        cfg.task.test_size = 2;
        let report = gen_data(&cfg, dir.path()).unwrap();
        assert_eq!(report.iter().map(|r| r.1).collect::<Vec<_>>(), [3, 2, 2]);
        assert_eq!(load_split(dir.path(), Split::Dev, &cfg).unwrap().len(), 2);
        let mut other = cfg.clone();
        other.task.noise_std = 0.5;
        let err = load_split(dir.path(), Split::Dev, &other).unwrap_err();
        assert!(config::is_validation(&err));
    }
}
