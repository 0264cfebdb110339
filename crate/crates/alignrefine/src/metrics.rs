//! Metrics CSV: `step,split,loss,wer_first,wer_step1,...,wer_stepR,skips,wall_s`.
//!
//! Numbers use Rust's shortest round-trip formatting, so two runs with equal
//! values write identical bytes. Wall time is the only non-deterministic
//! column; [`WallClock::Fixed`] writes `0` there for bitwise comparisons.

use std::io::Write;
use std::time::Instant;

use alignrefine_core::train::MetricsRow;

/// Where the `wall_s` column comes from.
#[derive(Clone, Copy, Debug)]
pub enum WallClock {
    Since(Instant),
    Fixed,
}

impl WallClock {
    pub fn start(fixed: bool) -> Self {
        if fixed {
            Self::Fixed
        } else {
            Self::Since(Instant::now())
        }
    }

    pub fn seconds(&self) -> f64 {
        match self {
            Self::Since(t) => t.elapsed().as_secs_f64(),
            Self::Fixed => 0.0,
        }
    }
}

pub fn header(refine_steps: usize) -> String {
    let mut cols = vec!["step".to_string(), "split".into(), "loss".into(), "wer_first".into()];
    cols.extend((1..=refine_steps).map(|k| format!("wer_step{k}")));
    cols.extend(["skips".into(), "wall_s".into()]);
    cols.join(",")
}

/// One CSV line. Rows with fewer refinement columns than `refine_steps`
/// leave the rest empty.
pub fn format_row(row: &MetricsRow, refine_steps: usize, wall_s: f64) -> String {
    let mut cols = vec![row.step.to_string(), row.split.clone(), row.loss.to_string(), row.wer_first.to_string()];
    cols.extend((0..refine_steps).map(|k| row.wer_steps.get(k).map(ToString::to_string).unwrap_or_default()));
    cols.push(row.skips.to_string());
    cols.push(format!("{wall_s:.3}"));
    cols.join(",")
}

/// Streams rows to a CSV sink, flushing after each one.
pub struct MetricsWriter<W: Write> {
    out: W,
    refine_steps: usize,
    clock: WallClock,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W, refine_steps: usize, clock: WallClock) -> std::io::Result<Self> {
        writeln!(out, "{}", header(refine_steps))?;
        Ok(Self { out, refine_steps, clock })
    }

    pub fn write(&mut self, row: &MetricsRow) -> std::io::Result<()> {
        writeln!(self.out, "{}", format_row(row, self.refine_steps, self.clock.seconds()))?;
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
