//! Ablation grids over refiner-side knobs with one frozen first pass.
//!
//! A grid file has an optional `[grid]` table of knob lists, expanded as a
//! cartesian product, and optional `[[run]]` tables that each add one
//! explicit variant (`name` plus knob values). Knobs are dotted keys under
//! `refiner`, `refiner_training`, or `beam_size`.
//!
//! Output is a CSV with a leading `config` column and one row per (variant,
//! split) final evaluation. Rerunning on an existing file skips variants it
//! already holds.

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use alignrefine_core::refiner::Refiner;
use alignrefine_core::rnnt::FirstPassModel;
use alignrefine_core::synth::{Split, Utterance};
use alignrefine_core::train::{train_refiner, ExperimentConfig, MetricsRow, Observer, Trained};
use anyhow::{bail, Context};
use toml::{Table, Value};

use crate::config::{self, invalid};
use crate::metrics::{self, WallClock};
use crate::pipeline::{evaluation_row, RunOptions};

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub overrides: Vec<(String, Value)>,
}

fn knob_allowed(key: &str) -> bool {
    key == "beam_size" || key.starts_with("refiner.") || key.starts_with("refiner_training.")
}

fn flatten(prefix: &str, table: &Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            _ => out.push((key, v.clone())),
        }
    }
}

fn check_knob(key: &str) -> anyhow::Result<()> {
    if !knob_allowed(key) {
        return Err(invalid(key, "only refiner, refiner_training and beam_size knobs can vary in a grid"));
    }
    Ok(())
}

fn value_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

pub fn label_of(overrides: &[(String, Value)]) -> String {
    if overrides.is_empty() {
        return "base".into();
    }
    overrides.iter().map(|(k, v)| format!("{k}={}", value_text(v))).collect::<Vec<_>>().join(";")
}

pub fn parse_grid(text: &str) -> anyhow::Result<Vec<Variant>> {
    let doc: Table = text.parse().map_err(|e: toml::de::Error| invalid("grid", e.message().to_string()))?;
    let mut variants = Vec::new();
    let mut axes = Vec::new();
    for (k, v) in &doc {
        match (k.as_str(), v) {
            ("grid", Value::Table(t)) => flatten("", t, &mut axes),
            ("run", Value::Array(_)) => {}
            _ => return Err(invalid(k.clone(), "expected a [grid] table or [[run]] tables")),
        }
    }
    let mut points: Vec<Vec<(String, Value)>> = vec![Vec::new()];
    for (key, values) in &axes {
        check_knob(key)?;
        let Value::Array(values) = values else {
            return Err(invalid(format!("grid.{key}"), "expected a list of values"));
        };
        if values.is_empty() {
            return Err(invalid(format!("grid.{key}"), "empty list"));
        }
        points = points
            .into_iter()
            .flat_map(|p| values.iter().map(move |v| p.iter().cloned().chain([(key.clone(), v.clone())]).collect()))
            .collect();
    }
    if !axes.is_empty() {
        variants.extend(points.into_iter().map(|o| Variant { label: label_of(&o), overrides: o }));
    }
    if let Some(Value::Array(runs)) = doc.get("run") {
        for (i, run) in runs.iter().enumerate() {
            let Value::Table(t) = run else {
                return Err(invalid(format!("run[{i}]"), "expected a table"));
            };
            let mut overrides = Vec::new();
            let mut name = None;
            for (k, v) in t {
                if k == "name" {
                    name = Some(value_text(v));
                    continue;
                }
                let mut flat = Vec::new();
                match v {
                    Value::Table(inner) => flatten(k, inner, &mut flat),
                    _ => flat.push((k.clone(), v.clone())),
                }
                for (key, _) in &flat {
                    check_knob(key)?;
                }
                overrides.extend(flat);
            }
            let label = name.unwrap_or_else(|| label_of(&overrides));
            variants.push(Variant { label, overrides });
        }
    }
    if variants.is_empty() {
        variants.push(Variant { label: "base".into(), overrides: Vec::new() });
    }
    let mut seen = BTreeSet::new();
    for v in &variants {
        if v.label.contains([',', '\n']) {
            return Err(invalid(format!("run `{}`", v.label), "labels cannot contain commas or newlines"));
        }
        if !seen.insert(v.label.clone()) {
            return Err(invalid(format!("run `{}`", v.label), "duplicate variant"));
        }
    }
    Ok(variants)
}

pub fn apply(base: &ExperimentConfig, v: &Variant) -> anyhow::Result<ExperimentConfig> {
    let mut table = config::to_table(base);
    for (k, val) in &v.overrides {
        config::set_key(&mut table, k, val.clone())?;
    }
    config::from_table(table).with_context(|| format!("variant `{}`", v.label))
}

pub fn csv_header(refine_steps: usize) -> String {
    format!("config,{}", metrics::header(refine_steps))
}

/// Variant labels already present in an ablation CSV.
pub fn completed_labels(path: &Path, refine_steps: usize) -> anyhow::Result<BTreeSet<String>> {
    let mut done = BTreeSet::new();
    if !path.exists() {
        return Ok(done);
    }
    let mut lines = BufReader::new(std::fs::File::open(path)?).lines();
    match lines.next().transpose()? {
        None => return Ok(done),
        Some(h) if h == csv_header(refine_steps) => {}
        Some(h) => bail!("{} has header `{h}`, expected `{}`", path.display(), csv_header(refine_steps)),
    }
    for line in lines {
        let line = line?;
        if let Some((label, _)) = line.split_once(',') {
            done.insert(label.to_string());
        }
    }
    Ok(done)
}

/// Everything produced for one variant.
#[derive(Clone, Debug)]
pub struct VariantResult {
    pub label: String,
    pub cfg: ExperimentConfig,
    pub trained: Trained<Refiner>,
    /// Training batch losses in step order.
    pub train_losses: Vec<f64>,
    /// Final evaluation rows, dev first.
    pub rows: Vec<MetricsRow>,
}

impl VariantResult {
    pub fn row(&self, split: Split) -> &MetricsRow {
        self.rows.iter().find(|r| r.split == split.name()).expect("split was evaluated")
    }
}

#[derive(Clone, Debug, Default)]
pub struct GridOutcome {
    pub ran: Vec<VariantResult>,
    pub skipped: Vec<String>,
}

struct Recorder<'a> {
    label: &'a str,
    losses: Vec<f64>,
    verbose: bool,
}

impl Observer for Recorder<'_> {
    fn on_eval(&mut self, row: &MetricsRow) {
        if self.verbose {
            eprintln!("[{}] step {} loss {:.4} wer_first {:.2} steps {:?}", self.label, row.step, row.loss, row.wer_first, row.wer_steps);
        }
    }

    fn on_step(&mut self, _step: usize, loss: f64) {
        self.losses.push(loss);
    }
}

/// Data the grid runs on.
pub struct GridData<'a> {
    pub train: &'a [Utterance],
    pub dev: &'a [Utterance],
    pub test: Option<&'a [Utterance]>,
}

/// Trains and evaluates every variant not yet in `out`, appending rows as
/// each variant finishes.
pub fn run_grid(
    base: &ExperimentConfig,
    variants: &[Variant],
    first: &FirstPassModel,
    data: &GridData<'_>,
    out: &Path,
    opts: &RunOptions,
) -> anyhow::Result<GridOutcome> {
    let configs: Vec<ExperimentConfig> = variants.iter().map(|v| apply(base, v)).collect::<Result<_, _>>()?;
    let refine_steps = configs.iter().map(|c| c.refiner.infer_steps).max().unwrap_or(0);
    let done = completed_labels(out, refine_steps)?;
    let fresh = !out.exists() || std::fs::metadata(out)?.len() == 0;
    let mut file = OpenOptions::new().create(true).append(true).open(out).with_context(|| format!("opening {}", out.display()))?;
    if fresh {
        writeln!(file, "{}", csv_header(refine_steps))?;
    }
    let mut outcome = GridOutcome::default();
    for (v, cfg) in variants.iter().zip(configs) {
        if done.contains(&v.label) {
            outcome.skipped.push(v.label.clone());
            continue;
        }
        let clock = WallClock::start(opts.fixed_wall_time);
        let mut rec = Recorder { label: &v.label, losses: Vec::new(), verbose: opts.verbose };
        let trained = train_refiner(&cfg, first, data.train, data.dev, &mut rec)?;
        let mut rows = Vec::new();
        let splits = [(Split::Dev, Some(data.dev)), (Split::Test, data.test)];
        for (split, corpus) in splits {
            let Some(corpus) = corpus else { continue };
            let steps = cfg.refiner.infer_steps;
            rows.push(evaluation_row(first, Some(&trained.model), corpus, split, trained.best_step, steps, cfg.beam_size, opts.threads)?);
        }
        let wall = clock.seconds();
        for r in &rows {
            writeln!(file, "{},{}", v.label, metrics::format_row(r, refine_steps, wall))?;
        }
        file.flush()?;
        outcome.ran.push(VariantResult { label: v.label.clone(), cfg, trained, train_losses: rec.losses, rows });
    }
    Ok(outcome)
}
