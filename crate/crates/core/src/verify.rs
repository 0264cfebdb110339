//! Self-checks that need no training: loss oracles, finite-difference
//! gradient gates and receptive-field probes. The `verify` subcommand and
//! the acceptance target both run these.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::align::{collapse, Alignment, LabelSequence, Vocab};
use crate::ctc::{ctc_loss, ctc_loss_oracle, ctc_loss_value, CtcInstance};
use crate::error::Result;
use crate::numcore::gradcheck::check_gradients;
use crate::numcore::{log_softmax_rows, Params, Rng, Tensor};
use crate::refiner::{RefineConfig, Refiner};
use crate::rnnt::{beam_search, greedy_decode, rnnt_forward_backward, rnnt_loss_on_tape, rnnt_loss_oracle};
use crate::rnnt::{FirstPassConfig, FirstPassModel};

/// Outcome of one suite.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    /// Worst observed error, or the number of failing cases for exact checks.
    pub worst: f64,
    pub detail: String,
}

impl SuiteReport {
    fn tolerance(name: &'static str, errors: &[f64], tol: f64) -> Self {
        let cases = errors.len();
        let ok = errors.iter().filter(|&&e| e < tol).count();
        let worst = errors.iter().copied().fold(0.0, f64::max);
        Self { name, passed: ok == cases, cases, worst, detail: format!("{ok}/{cases} matched < {tol:e} (worst {worst:.2e})") }
    }

    fn exact(name: &'static str, cases: usize, failures: usize, what: &str) -> Self {
        Self {
            name,
            passed: failures == 0,
            cases,
            worst: failures as f64,
            detail: format!("{}/{cases} {what}", cases - failures),
        }
    }
}

fn random_log_probs(rng: &mut Rng, rows: usize, classes: usize) -> Tensor {
    let logits = Tensor::new(&[rows, classes], (0..rows * classes).map(|_| 1.5 * rng.normal()).collect())
        .expect("shape matches data");
    log_softmax_rows(&logits).expect("non-empty rows")
}

fn random_labels(rng: &mut Rng, len: usize, v: usize) -> LabelSequence {
    LabelSequence((0..len).map(|_| rng.range_inclusive(1, v)).collect())
}

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.normal()).collect()).expect("shape matches data")
}

/// CTC dynamic program against exhaustive path enumeration; `T ≤ 6`, `U ≤ 3`,
/// `V ≤ 4`. Infeasible instances must agree on `+∞`.
pub fn ctc_oracle(seed: u64, cases: usize) -> Result<SuiteReport> {
    let mut rng = Rng::derive(seed, &[1]);
    let mut errors = Vec::with_capacity(cases);
    for _ in 0..cases {
        let t = rng.range_inclusive(1, 6);
        let v = rng.range_inclusive(1, 4);
        let u = rng.range_inclusive(0, 3);
        let lp = random_log_probs(&mut rng, t, v + 1);
        let inst = CtcInstance::new(lp, random_labels(&mut rng, u, v))?;
        let dp = ctc_loss_value(&inst)?;
        let oracle = ctc_loss_oracle(&inst)?;
        let err = match (dp.is_finite(), oracle.is_finite()) {
            (true, true) => (dp - oracle).abs(),
            (false, false) => 0.0,
            _ => f64::INFINITY,
        };
        errors.push(err);
    }
    Ok(SuiteReport::tolerance("ctc-oracle", &errors, 1e-6))
}

/// Transducer lattice loss against path enumeration; `T′ ≤ 4`, `U ≤ 3`, `V ≤ 3`.
pub fn rnnt_oracle(seed: u64, cases: usize) -> Result<SuiteReport> {
    let mut rng = Rng::derive(seed, &[2]);
    let mut errors = Vec::with_capacity(cases);
    for _ in 0..cases {
        let frames = rng.range_inclusive(1, 4);
        let u = rng.range_inclusive(0, 3);
        let v = rng.range_inclusive(1, 3);
        let lp = random_log_probs(&mut rng, frames * (u + 1), v + 1);
        let target = random_labels(&mut rng, u, v);
        let (dp, _) = rnnt_forward_backward(&lp, frames, &target)?;
        errors.push((dp - rnnt_loss_oracle(&lp, frames, &target)?).abs());
    }
    Ok(SuiteReport::tolerance("rnnt-oracle", &errors, 1e-6))
}

/// Finite-difference check of the CTC gradient on feasible instances.
pub fn ctc_gradients(seed: u64, cases: usize) -> Result<SuiteReport> {
    let mut rng = Rng::derive(seed, &[3]);
    let mut errors = Vec::with_capacity(cases);
    let mut done = 0;
    while done < cases {
        let t = rng.range_inclusive(1, 5);
        let v = rng.range_inclusive(1, 4);
        let u = rng.range_inclusive(0, 3);
        let inst = CtcInstance::new(random_log_probs(&mut rng, t, v + 1), random_labels(&mut rng, u, v))?;
        if !ctc_loss_value(&inst)?.is_finite() {
            continue;
        }
        let mut params = Params::new();
        let id = params.add("log_probs", inst.log_probs.clone())?;
        let res = check_gradients(&mut params, None, |tape, p| {
            let x = tape.param(p, id);
            Ok(ctc_loss(tape, x, &inst.target)?.loss)
        })?;
        errors.push(res.max_rel_err);
        done += 1;
    }
    Ok(SuiteReport::tolerance("ctc-gradient", &errors, 1e-4))
}

/// Finite-difference check of the transducer lattice gradient.
pub fn rnnt_gradients(seed: u64, cases: usize) -> Result<SuiteReport> {
    let mut rng = Rng::derive(seed, &[4]);
    let mut errors = Vec::with_capacity(cases);
    for _ in 0..cases {
        let frames = rng.range_inclusive(1, 4);
        let u = rng.range_inclusive(0, 3);
        let lp = random_log_probs(&mut rng, frames * (u + 1), 4);
        let target = random_labels(&mut rng, u, 3);
        let mut params = Params::new();
        let id = params.add("log_probs", lp)?;
        let res = check_gradients(&mut params, None, |tape, p| {
            let x = tape.param(p, id);
            rnnt_loss_on_tape(tape, x, frames, &target)
        })?;
        errors.push(res.max_rel_err);
    }
    Ok(SuiteReport::tolerance("rnnt-gradient", &errors, 1e-4))
}

const PROBE_VOCAB: Vocab = Vocab { num_labels: 4 };
const PROBE_D0: usize = 6;

fn probe_refiner(cascade_layers: usize, train_steps: usize, mask_prob: f64, seed: u64) -> Result<Refiner> {
    let cfg = RefineConfig {
        layers: 1,
        cascade_layers,
        dim: 8,
        heads: 2,
        ffn_hidden: 16,
        train_steps,
        infer_steps: 2,
        mask_prob,
        dropout: 0.0,
        clean_step_inputs: true,
    };
    Refiner::new(cfg, PROBE_D0, PROBE_VOCAB, seed)
}

/// Finite-difference check of the multi-step refinement loss through every
/// refiner parameter (one cascade layer, two steps, masking on).
pub fn refiner_gradients(seed: u64, cases: usize) -> Result<SuiteReport> {
    let mut rng = Rng::derive(seed, &[5]);
    let mut errors = Vec::with_capacity(cases);
    let mut done = 0;
    while done < cases {
        let mut r = probe_refiner(1, 2, 0.3, rng.next_u64())?;
        let frames = rng.range_inclusive(2, 5);
        let h0 = random_matrix(&mut rng, frames, PROBE_D0);
        let len = rng.range_inclusive(3, 6);
        let a0 = Alignment((0..len).map(|_| rng.range_inclusive(0, PROBE_VOCAB.num_labels)).collect());
        let u = rng.range_inclusive(1, 2);
        let target = random_labels(&mut rng, u, PROBE_VOCAB.num_labels);
        let mask_seed = rng.next_u64();
        if a0.len() < target.min_ctc_frames() {
            continue;
        }
        let view = r.clone();
        let res = check_gradients(&mut r.params, None, |tape, p| {
            let mut m = view.clone();
            m.params = p.clone();
            let out = m.refine_train_loss(tape, &h0, &a0, &target, &mut Rng::new(mask_seed))?;
            Ok(out.expect("feasible by construction").loss)
        })?;
        errors.push(res.max_rel_err);
        done += 1;
    }
    Ok(SuiteReport::tolerance("refiner-gradient", &errors, 1e-3))
}

fn probe_first_pass(layers: usize, seed: u64) -> Result<FirstPassModel> {
    let cfg = FirstPassConfig {
        feature_dim: 3,
        num_labels: 3,
        dim: 8,
        layers,
        heads: 2,
        ffn_hidden: 12,
        max_emit_per_frame: 3,
        dropout: 0.0,
    };
    FirstPassModel::new(cfg, seed)
}

fn rows_identical(a: &Tensor, b: &Tensor, r: usize) -> bool {
    a.row(r).iter().zip(b.row(r)).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Perturbing frame `s` of the features changes no encoder output before
/// `s` and does change output `s`.
pub fn encoder_causality(seed: u64, cases: usize) -> Result<SuiteReport> {
    let mut rng = Rng::derive(seed, &[6]);
    let mut failures = 0;
    for case in 0..cases {
        let model = probe_first_pass(1 + case % 3, rng.next_u64())?;
        let frames = rng.range_inclusive(2, 10);
        let x = random_matrix(&mut rng, frames, 3);
        let src = rng.range_inclusive(1, frames - 1);
        let mut y = x.clone();
        y.row_mut(src).iter_mut().for_each(|v| *v += 5.0);
        let (a, b) = (model.encode_causal(&x)?, model.encode_causal(&y)?);
        let ok = (0..src).all(|t| rows_identical(&a, &b, t)) && !rows_identical(&a, &b, src);
        failures += usize::from(!ok);
    }
    Ok(SuiteReport::exact("encoder-causality", cases, failures, "perturbations respected causality"))
}

/// Cascade output `t` reads input frames up to `t + 3·L′` and no further.
pub fn cascade_right_context(seed: u64, cases: usize) -> Result<SuiteReport> {
    let mut rng = Rng::derive(seed, &[7]);
    let mut failures = 0;
    for case in 0..cases {
        let layers = 1 + case % 2;
        let r = probe_refiner(layers, 1, 0.0, rng.next_u64())?;
        let reach = r.lookahead();
        let frames = rng.range_inclusive(reach + 2, reach + 10);
        let h0 = random_matrix(&mut rng, frames, PROBE_D0);
        let src = rng.range_inclusive(0, frames - 1);
        let mut moved = h0.clone();
        moved.row_mut(src).iter_mut().for_each(|v| *v += 5.0);
        let (a, b) = (r.encode_audio(&h0)?, r.encode_audio(&moved)?);
        let ok = (0..frames).all(|t| rows_identical(&a, &b, t) == (src > t + reach));
        failures += usize::from(!ok);
    }
    Ok(SuiteReport::exact("cascade-right-context", cases, failures, "perturbations within 3·L′ frames"))
}

/// Beam search with one hypothesis reproduces the greedy loop exactly.
pub fn beam_matches_greedy(seed: u64, cases: usize) -> Result<SuiteReport> {
    let mut rng = Rng::derive(seed, &[8]);
    let mut failures = 0;
    for case in 0..cases {
        let model = probe_first_pass(1 + case % 2, rng.next_u64())?;
        let frames = rng.range_inclusive(1, 10);
        let enc = model.encode_causal(&random_matrix(&mut rng, frames, 3))?;
        let scorer = model.scorer(&enc)?;
        let greedy = greedy_decode(&scorer, 3);
        let beam = beam_search(&scorer, 1, 3)?;
        let ok = beam.len() == 1 && beam[0].alignment == greedy.alignment && beam[0].labels == greedy.labels;
        failures += usize::from(!ok);
    }
    Ok(SuiteReport::exact("beam1-equals-greedy", cases, failures, "identical alignments"))
}

/// Every decoded alignment has exactly one blank per frame and collapses to
/// its hypothesis, for beam sizes 1 and 4.
pub fn alignment_blanks(seed: u64, cases: usize) -> Result<SuiteReport> {
    let mut rng = Rng::derive(seed, &[9]);
    let vocab = Vocab::new(3);
    let mut failures = 0;
    for _ in 0..cases {
        let model = probe_first_pass(1, rng.next_u64())?;
        let frames = rng.range_inclusive(1, 10);
        let enc = model.encode_causal(&random_matrix(&mut rng, frames, 3))?;
        let scorer = model.scorer(&enc)?;
        let mut ok = true;
        for beam in [1, 4] {
            for h in beam_search(&scorer, beam, 3)? {
                ok &= h.alignment.count_blanks() == frames && collapse(&h.alignment, vocab)? == h.labels;
            }
        }
        failures += usize::from(!ok);
    }
    Ok(SuiteReport::exact("alignment-blanks", cases, failures, "alignments with T′ blanks"))
}

/// Suite names accepted by [`run_suite`], in run order.
pub const SUITES: [&str; 9] = [
    "ctc-oracle",
    "rnnt-oracle",
    "ctc-gradient",
    "rnnt-gradient",
    "refiner-gradient",
    "encoder-causality",
    "cascade-right-context",
    "beam1-equals-greedy",
    "alignment-blanks",
];

/// Runs one suite at its acceptance size; `None` for an unknown name.
pub fn run_suite(name: &str, seed: u64) -> Result<Option<SuiteReport>> {
    let r = match name {
        "ctc-oracle" => ctc_oracle(seed, 200)?,
        "rnnt-oracle" => rnnt_oracle(seed, 100)?,
        "ctc-gradient" => ctc_gradients(seed, 20)?,
        "rnnt-gradient" => rnnt_gradients(seed, 20)?,
        "refiner-gradient" => refiner_gradients(seed, 20)?,
        "encoder-causality" => encoder_causality(seed, 20)?,
        "cascade-right-context" => cascade_right_context(seed, 20)?,
        "beam1-equals-greedy" => beam_matches_greedy(seed, 50)?,
        "alignment-blanks" => alignment_blanks(seed, 50)?,
        _ => return Ok(None),
    };
    Ok(Some(r))
}

pub fn run_all(seed: u64) -> Result<Vec<SuiteReport>> {
    SUITES.iter().map(|n| run_suite(n, seed).map(|r| r.expect("listed suite"))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        for r in [
            ctc_oracle(1, 30).unwrap(),
            rnnt_oracle(1, 20).unwrap(),
            ctc_gradients(1, 3).unwrap(),
            rnnt_gradients(1, 3).unwrap(),
            refiner_gradients(1, 2).unwrap(),
            encoder_causality(1, 5).unwrap(),
            cascade_right_context(1, 5).unwrap(),
            beam_matches_greedy(1, 5).unwrap(),
            alignment_blanks(1, 5).unwrap(),
        ] {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn reports_flag_failures() {
        let r = SuiteReport::tolerance("x", &[1e-9, 2e-6], 1e-6);
        assert!(!r.passed);
        assert!(r.detail.starts_with("1/2 matched < 1e-6"), "{}", r.detail);
        assert!(!SuiteReport::tolerance("x", &[f64::INFINITY], 1e-6).passed);
        let r = SuiteReport::exact("x", 4, 1, "ok");
        assert!(!r.passed);
        assert_eq!(r.detail, "3/4 ok");
    }

    #[test]
    fn suite_names_resolve() {
        assert!(run_suite("nope", 0).unwrap().is_none());
        let r = run_suite("ctc-oracle", 0).unwrap().unwrap();
        assert_eq!(r.name, SUITES[0]);
        assert!(r.detail.starts_with("200/200 matched < 1e-6"), "{}", r.detail);
    }

    #[test]
    fn suites_are_deterministic() {
        assert_eq!(ctc_oracle(5, 10).unwrap(), ctc_oracle(5, 10).unwrap());
        assert_eq!(cascade_right_context(5, 4).unwrap(), cascade_right_context(5, 4).unwrap());
    }
}
