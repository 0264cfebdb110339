use std::path::{Path, PathBuf};
use std::process::ExitCode;

use alignrefine::ablation::{self, GridData};
use alignrefine::config::{self, invalid, is_validation};
use alignrefine::pipeline::{self, RunOptions};
use alignrefine::{corpus_io, plot, report};
use alignrefine_core::synth::Split;
use alignrefine_core::train::ExperimentConfig;
use alignrefine_core::verify;
use anyhow::Context;
use clap::{Args, Parser, Subcommand};

/// Streaming transducer first pass plus iterative alignment refinement on a
/// synthetic task.
#[derive(Parser, Debug)]
#[command(name = "alignrefine", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (TOML); omitted keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct Output {
    /// Write 0 in the wall_s column so metrics files compare bitwise.
    #[arg(long)]
    fixed_wall_time: bool,
    /// Print evaluation rows to stderr during training.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/dev/test corpora and print their hashes.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Task spec: `default` or a TOML file of task fields; overrides the config's task.
        #[arg(long)]
        spec: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the first pass with the transducer loss.
    TrainFirstPass {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        output: Output,
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the refiner on alignments from a frozen first pass.
    TrainRefiner {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        output: Output,
        #[arg(long)]
        data: PathBuf,
        /// First-pass checkpoint prefix.
        #[arg(long)]
        first: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print hypotheses per refinement step with S/I/D edit tags.
    Decode {
        #[command(flatten)]
        model: ModelArgs,
        /// Utterance id; every utterance when omitted.
        #[arg(long)]
        utt: Option<String>,
    },
    /// Corpus WER for the first pass and each refinement step.
    Evaluate {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        output: Output,
        /// Metrics CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate a grid of refiner variants against one first pass.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        output: Output,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        first: PathBuf,
        /// Results CSV; existing rows are kept and their variants skipped.
        #[arg(long)]
        out: PathBuf,
        /// Also write an SVG chart of dev WER per step.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Run oracle, gradient and receptive-field suites.
    Verify {
        /// Suite name; repeatable. All suites when omitted.
        #[arg(long)]
        suite: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// First-pass checkpoint prefix.
    #[arg(long)]
    first: PathBuf,
    /// Refiner checkpoint prefix.
    #[arg(long)]
    refiner: Option<PathBuf>,
    /// Corpus file.
    #[arg(long)]
    corpus: PathBuf,
    /// Refinement steps; the refiner's configured count when omitted.
    #[arg(long)]
    steps: Option<usize>,
    /// First-pass beam; the configured size when omitted.
    #[arg(long)]
    beam: Option<usize>,
}

fn resolve(common: &Common, fallback: Option<ExperimentConfig>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match (&common.config, fallback) {
        (Some(p), _) => config::load(p)?,
        (None, Some(c)) => c,
        (None, None) => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn options(output: &Output) -> RunOptions {
    RunOptions { fixed_wall_time: output.fixed_wall_time, threads: RunOptions::threads_from_env(), verbose: output.verbose }
}

fn log_config(cfg: &ExperimentConfig) {
    eprintln!("resolved config:\n{}", config::to_toml(cfg));
}

struct Loaded {
    first: alignrefine_core::rnnt::FirstPassModel,
    first_step: usize,
    refiner: Option<(alignrefine_core::refiner::Refiner, usize)>,
    cfg: ExperimentConfig,
    steps: usize,
    beam: usize,
}

fn load_models(m: &ModelArgs) -> anyhow::Result<Loaded> {
    let (fp_cfg, first, first_step) = pipeline::load_first_pass(&m.first)?;
    let (cfg, refiner) = match &m.refiner {
        Some(p) => {
            let (cfg, r, step) = pipeline::load_refiner(p, &first)?;
            (cfg, Some((r, step)))
        }
        None => (fp_cfg, None),
    };
    let steps = match (&refiner, m.steps) {
        (None, Some(s)) if s > 0 => return Err(invalid("steps", "refinement steps need --refiner")),
        (None, _) => 0,
        (Some(_), Some(0)) => return Err(invalid("steps", "must be at least 1 with a refiner")),
        (Some(_), Some(s)) => s,
        (Some((r, _)), None) => r.cfg.infer_steps,
    };
    let beam = m.beam.unwrap_or(cfg.beam_size);
    if beam == 0 {
        return Err(invalid("beam", "must be at least 1"));
    }
    Ok(Loaded { first, first_step, refiner, cfg, steps, beam })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { common, spec, out } => {
            let mut cfg = resolve(&common, None)?;
            if let Some(s) = spec {
                cfg.task = config::load_task_spec(&s)?;
                cfg.first_pass.feature_dim = cfg.task.feature_dim;
                cfg.first_pass.num_labels = cfg.task.num_labels;
                cfg.validate()?;
            }
            for (split, n, hash) in pipeline::gen_data(&cfg, &out)? {
                println!("{} {n} {hash}", split.name());
            }
        }
        Command::TrainFirstPass { common, output, data, out } => {
            let cfg = resolve(&common, None)?;
            log_config(&cfg);
            let t = pipeline::run_first_pass(&cfg, &data, &out, &options(&output))?;
            let last = t.rows.last().context("no evaluation rows")?;
            println!("first pass: {} steps, best step {}, dev WER {:.2}", t.steps, t.best_step, last.wer_first);
        }
        Command::TrainRefiner { common, output, data, first, out } => {
            let (fp_cfg, model, _) = pipeline::load_first_pass(&first)?;
            let cfg = resolve(&common, Some(fp_cfg))?;
            log_config(&cfg);
            let t = pipeline::run_refiner(&cfg, &model, &data, &out, &options(&output))?;
            let last = t.rows.last().context("no evaluation rows")?;
            println!("refiner: {} steps, best step {}, dev WER per step {:?}", t.steps, t.best_step, last.wer_steps);
        }
        Command::Decode { model, utt } => {
            let l = load_models(&model)?;
            let corpus = corpus_io::load(&model.corpus)?;
            let utts: Vec<_> = match &utt {
                Some(id) => vec![corpus.utterances.iter().find(|u| &u.id == id).ok_or_else(|| invalid("utt", format!("no utterance `{id}`")))?],
                None => corpus.utterances.iter().collect(),
            };
            let refiner = l.refiner.as_ref().map(|r| &r.0);
            for u in utts {
                let d = alignrefine_core::train::decode_utterance(&l.first, refiner, &u.features, l.steps, l.beam)?;
                print!("{}", report::decode_report(&u.id, &u.target, &d, l.first.vocab()));
            }
        }
        Command::Evaluate { model, output, out } => {
            let l = load_models(&model)?;
            let corpus = corpus_io::load(&model.corpus)?;
            if corpus.header.task != l.cfg.task {
                return Err(invalid("corpus", "generated from a different task spec than the checkpoints"));
            }
            let step = l.refiner.as_ref().map_or(l.first_step, |r| r.1);
            let opts = options(&output);
            let row = pipeline::evaluation_row(
                &l.first,
                l.refiner.as_ref().map(|r| &r.0),
                &corpus.utterances,
                corpus.header.split,
                step,
                l.steps,
                l.beam,
                opts.threads,
            )?;
            match out {
                Some(p) => pipeline::write_rows(&p, &[row], l.steps, &opts)?,
                None => {
                    println!("{}", alignrefine::metrics::header(l.steps));
                    println!("{}", alignrefine::metrics::format_row(&row, l.steps, 0.0));
                }
            }
        }
        Command::Ablate { common, output, grid, data, first, out, plot: plot_path } => {
            let (fp_cfg, model, _) = pipeline::load_first_pass(&first)?;
            let base = resolve(&common, Some(fp_cfg))?;
            let text = std::fs::read_to_string(&grid).with_context(|| format!("reading {}", grid.display()))?;
            let variants = ablation::parse_grid(&text)?;
            let train = pipeline::load_split(&data, Split::Train, &base)?;
            let dev = pipeline::load_split(&data, Split::Dev, &base)?;
            let test = pipeline::load_split(&data, Split::Test, &base)?;
            let grid_data = GridData { train: &train, dev: &dev, test: Some(&test) };
            let outcome = ablation::run_grid(&base, &variants, &model, &grid_data, &out, &options(&output))?;
            for s in &outcome.skipped {
                println!("skipped {s} (already in {})", out.display());
            }
            for r in &outcome.ran {
                let dev = r.row(Split::Dev);
                println!("{}: first {:.2} steps {:?}", r.label, dev.wer_first, dev.wer_steps);
            }
            if let Some(p) = plot_path {
                write_plot(&p, &out)?;
            }
        }
        Command::Verify { suite, seed } => {
            let names: Vec<String> = if suite.is_empty() { verify::SUITES.iter().map(|s| s.to_string()).collect() } else { suite };
            let mut failed = 0;
            for n in &names {
                let r = verify::run_suite(n, seed)?.ok_or_else(|| invalid("suite", format!("unknown suite `{n}`; known: {}", verify::SUITES.join(", "))))?;
                println!("{:<22} {}  {}", r.name, if r.passed { "PASS" } else { "FAIL" }, r.detail);
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                anyhow::bail!("{failed} suite(s) failed");
            }
        }
    }
    Ok(())
}

/// Chart of dev WER per step for every variant in an ablation CSV.
fn write_plot(path: &Path, csv: &Path) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(csv)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().context("empty ablation file")?.split(',').collect();
    let first_col = header.iter().position(|h| *h == "wer_first").context("no wer_first column")?;
    let skips_col = header.iter().position(|h| *h == "skips").context("no skips column")?;
    let mut series = Vec::new();
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.get(2) != Some(&"dev") {
            continue;
        }
        let values = cols[first_col..skips_col].iter().filter(|c| !c.is_empty()).map(|c| c.parse::<f64>()).collect::<Result<Vec<_>, _>>()?;
        series.push((cols[0].to_string(), values));
    }
    std::fs::write(path, plot::wer_chart("dev WER by refinement step", &series))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 1 } else { 2 })
        }
    }
}
