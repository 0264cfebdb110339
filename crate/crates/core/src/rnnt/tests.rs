use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::align::{collapse, LabelSequence, Vocab, BLANK};
use crate::numcore::gradcheck::check_gradients;
use crate::numcore::{log_softmax_rows, Params, Rng, Tape, Tensor};

fn tiny_config(layers: usize) -> FirstPassConfig {
    FirstPassConfig {
        feature_dim: 3,
        num_labels: 3,
        dim: 8,
        layers,
        heads: 2,
        ffn_hidden: 12,
        max_emit_per_frame: 3,
        dropout: 0.0,
    }
}

fn random_features(rng: &mut Rng, frames: usize, dims: usize) -> Tensor {
    Tensor::new(&[frames, dims], (0..frames * dims).map(|_| rng.normal()).collect()).unwrap()
}

fn random_lattice(rng: &mut Rng, frames: usize, u: usize, v: usize) -> (Tensor, LabelSequence) {
    let rows = frames * (u + 1);
    let logits = Tensor::new(&[rows, v + 1], (0..rows * (v + 1)).map(|_| 1.5 * rng.normal()).collect()).unwrap();
    let target = LabelSequence((0..u).map(|_| rng.range_inclusive(1, v)).collect());
    (log_softmax_rows(&logits).unwrap(), target)
}

#[test]
fn single_frame_single_label() {
    // Rows: (t0,u0), (t0,u1).
    let lp = log_softmax_rows(&Tensor::from_rows(&[vec![0.1, 0.7, -0.2], vec![1.0, 0.3, 0.0]]).unwrap()).unwrap();
    let target = LabelSequence(vec![1]);
    let (loss, _) = rnnt_forward_backward(&lp, 1, &target).unwrap();
    let expected = -(lp.at(0, 1) + lp.at(1, BLANK));
    assert!((loss - expected).abs() < 1e-12);
}

#[test]
fn empty_target_is_all_blanks() {
    let lp = log_softmax_rows(&Tensor::from_rows(&[vec![0.5, 0.1], vec![-0.3, 0.9]]).unwrap()).unwrap();
    let (loss, _) = rnnt_forward_backward(&lp, 2, &LabelSequence(vec![])).unwrap();
    assert!((loss + lp.at(0, BLANK) + lp.at(1, BLANK)).abs() < 1e-12);
}

#[test]
fn loss_matches_path_enumeration() {
    let mut rng = Rng::new(1618);
    for _ in 0..100 {
        let frames = rng.range_inclusive(1, 4);
        let u = rng.range_inclusive(0, 3);
        let v = rng.range_inclusive(1, 3);
        let (lp, target) = random_lattice(&mut rng, frames, u, v);
        let (dp, _) = rnnt_forward_backward(&lp, frames, &target).unwrap();
        let oracle = rnnt_loss_oracle(&lp, frames, &target).unwrap();
        assert!((dp - oracle).abs() < 1e-6, "dp {dp} oracle {oracle}");
        assert!(dp >= -1e-9);
    }
}

#[test]
fn lattice_gradient_matches_finite_differences() {
    let mut rng = Rng::new(77);
    for _ in 0..20 {
        let frames = rng.range_inclusive(1, 4);
        let u = rng.range_inclusive(0, 3);
        let (lp, target) = random_lattice(&mut rng, frames, u, 3);
        let mut params = Params::new();
        let id = params.add("lp", lp).unwrap();
        let res = check_gradients(&mut params, None, |tape, p| {
            let x = tape.param(p, id);
            rnnt_loss_on_tape(tape, x, frames, &target)
        })
        .unwrap();
        assert!(res.max_rel_err < 1e-4, "{}", res.max_rel_err);
    }
}

#[test]
fn model_gradient_matches_finite_differences() {
    let mut rng = Rng::new(5);
    let mut model = FirstPassModel::new(tiny_config(1), 9).unwrap();
    let feats = random_features(&mut rng, 3, 3);
    let target = LabelSequence(vec![2, 1]);
    let model_view = model.clone();
    let res = check_gradients(&mut model.params, None, |tape, p| {
        let mut m = model_view.clone();
        m.params = p.clone();
        m.loss(tape, &feats, &target, None)
    })
    .unwrap();
    assert!(res.max_rel_err < 1e-4, "{}", res.max_rel_err);
}

#[test]
fn encoder_is_causal() {
    for layers in [1, 3] {
        let model = FirstPassModel::new(tiny_config(layers), 3).unwrap();
        let mut rng = Rng::new(layers as u64);
        for _ in 0..20 {
            let frames = rng.range_inclusive(2, 8);
            let x = random_features(&mut rng, frames, 3);
            let base = model.encode_causal(&x).unwrap();
            let t = rng.range_inclusive(0, frames - 2);
            let mut y = x.clone();
            for v in y.row_mut(t + 1) {
                *v += 10.0;
            }
            let pert = model.encode_causal(&y).unwrap();
            for r in 0..=t {
                assert!(base.row(r).iter().zip(pert.row(r)).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
            assert_ne!(base.row(t + 1), pert.row(t + 1));
        }
    }
    let single = FirstPassModel::new(tiny_config(2), 1).unwrap();
    let out = single.encode_causal(&random_features(&mut Rng::new(0), 1, 3)).unwrap();
    assert_eq!(out.shape(), &[1, 8]);
}

#[test]
fn encoder_jacobian_is_lower_triangular() {
    let model = FirstPassModel::new(tiny_config(3), 4).unwrap();
    let x = random_features(&mut Rng::new(21), 6, 3);
    let h = 1e-5;
    for src in 0..6 {
        for dim in 0..3 {
            let mut up = x.clone();
            up.row_mut(src)[dim] += h;
            let mut down = x.clone();
            down.row_mut(src)[dim] -= h;
            let (a, b) = (model.encode_causal(&up).unwrap(), model.encode_causal(&down).unwrap());
            for out in 0..6 {
                let d: f64 = a.row(out).iter().zip(b.row(out)).map(|(p, q)| ((p - q) / (2.0 * h)).abs()).sum();
                if src > out {
                    assert_eq!(d, 0.0, "out {out} depends on future frame {src}");
                } else if src == out {
                    assert!(d > 0.0);
                }
            }
        }
    }
}

/// Joint output table indexed by (frame, labels emitted so far).
struct TableTransducer {
    frames: usize,
    table: Vec<Vec<Vec<f64>>>,
}

impl Transducer for TableTransducer {
    type State = usize;
    fn frames(&self) -> usize {
        self.frames
    }
    fn num_classes(&self) -> usize {
        self.table[0][0].len()
    }
    fn initial_state(&self) -> usize {
        0
    }
    fn log_probs(&self, frame: usize, state: &usize) -> Vec<f64> {
        let row = &self.table[frame];
        row[(*state).min(row.len() - 1)].iter().map(|p| p.ln()).collect()
    }
    fn advance(&self, state: &usize, _label: usize) -> usize {
        state + 1
    }
}

/// Best path score by enumerating every alignment with at most `cap` labels
/// per frame.
fn best_path(m: &TableTransducer, cap: usize) -> (f64, Vec<usize>) {
    fn go(m: &TableTransducer, t: usize, u: usize, here: usize, cap: usize, acc: f64, path: &mut Vec<usize>, best: &mut (f64, Vec<usize>)) {
        if t == m.frames {
            if acc > best.0 {
                *best = (acc, path.clone());
            }
            return;
        }
        let lp = m.log_probs(t, &u);
        path.push(BLANK);
        go(m, t + 1, u, 0, cap, acc + lp[BLANK], path, best);
        path.pop();
        if here < cap {
            for k in 1..lp.len() {
                path.push(k);
                go(m, t, u + 1, here + 1, cap, acc + lp[k], path, best);
                path.pop();
            }
        }
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    go(m, 0, 0, 0, cap, 0.0, &mut Vec::new(), &mut best);
    best
}

#[test]
fn beam_finds_delayed_emission_that_greedy_misses() {
    // Frame 0 prefers blank (0.6 vs 0.4) but emitting `1` there leads to a
    // confident state: 0.4·0.9·0.9 = 0.324 beats 0.6·0.5 = 0.3.
    let m = TableTransducer {
        frames: 2,
        table: vec![vec![vec![0.6, 0.4], vec![0.9, 0.1]], vec![vec![0.5, 0.5], vec![0.9, 0.1]]],
    };
    let greedy = greedy_decode(&m, 1);
    assert_eq!(greedy.alignment.0, vec![0, 0]);
    assert!((greedy.log_score - 0.3f64.ln()).abs() < 1e-12);

    let beam = beam_search(&m, 2, 1).unwrap();
    let (best_score, best_path_tokens) = best_path(&m, 1);
    assert_eq!(beam[0].alignment.0, best_path_tokens);
    assert_eq!(beam[0].alignment.0, vec![1, 0, 0]);
    assert!((beam[0].log_score - best_score).abs() < 1e-12);
    assert!(beam[0].log_score > greedy.log_score);

    let one = beam_search(&m, 1, 1).unwrap();
    assert_eq!(one[0].alignment, greedy.alignment);
}

#[test]
fn beam_one_equals_greedy_on_random_models() {
    let mut rng = Rng::new(404);
    for case in 0..50u64 {
        let model = FirstPassModel::new(tiny_config(1 + (case % 2) as usize), case).unwrap();
        let frames = rng.range_inclusive(1, 10);
        let feats = random_features(&mut rng, frames, 3);
        let enc = model.encode_causal(&feats).unwrap();
        let scorer = model.scorer(&enc).unwrap();
        let greedy = greedy_decode(&scorer, 3);
        let beam = beam_search(&scorer, 1, 3).unwrap();
        assert_eq!(beam.len(), 1);
        assert_eq!(beam[0].alignment, greedy.alignment);
        assert_eq!(beam[0].labels, greedy.labels);
    }
}

#[test]
fn alignments_have_one_blank_per_frame() {
    let vocab = Vocab::new(3);
    let mut rng = Rng::new(8);
    for case in 0..20u64 {
        let model = FirstPassModel::new(tiny_config(1), 100 + case).unwrap();
        let frames = rng.range_inclusive(1, 9);
        let feats = random_features(&mut rng, frames, 3);
        for beam in [1, 4] {
            let hyps = decode(&model, &feats, beam, 2).unwrap();
            assert!(!hyps.is_empty() && hyps.len() <= beam);
            assert!(hyps.windows(2).all(|w| w[0].log_score >= w[1].log_score));
            for h in &hyps {
                assert_eq!(h.alignment.count_blanks(), frames);
                assert_eq!(h.alignment.len(), frames + h.labels.len());
                assert_eq!(collapse(&h.alignment, vocab).unwrap(), h.labels);
            }
        }
    }
}

#[test]
fn no_label_repeats_inside_a_frame() {
    // Label 1 stays the argmax after emitting it; the decoder must take the
    // runner-up or close the frame so that collapse keeps every label.
    let vocab = Vocab::new(2);
    let m = TableTransducer {
        frames: 2,
        table: vec![vec![vec![0.1, 0.6, 0.3]; 4], vec![vec![0.5, 0.3, 0.2]; 4]],
    };
    let h = greedy_decode(&m, 3);
    assert_eq!(h.alignment.0, vec![1, 2, 1, 0, 0]);
    assert_eq!(collapse(&h.alignment, vocab).unwrap(), h.labels);
    for beam in 1..=4 {
        for hyp in beam_search(&m, beam, 3).unwrap() {
            assert!(hyp.alignment.0.windows(2).all(|w| w[0] == BLANK || w[0] != w[1]));
            assert_eq!(collapse(&hyp.alignment, vocab).unwrap(), hyp.labels);
        }
    }
}

#[test]
fn scorer_matches_tape_lattice() {
    let model = FirstPassModel::new(tiny_config(2), 12).unwrap();
    let feats = random_features(&mut Rng::new(6), 4, 3);
    let target = LabelSequence(vec![3, 1]);
    let mut tape = Tape::new();
    let f = tape.constant(feats.clone());
    let enc = model.encode(&mut tape, f, None).unwrap();
    let lp = model.lattice_log_probs(&mut tape, enc, &target).unwrap();
    let lattice = tape.value(lp).clone();
    let enc_t = tape.value(enc).clone();
    let scorer = model.scorer(&enc_t).unwrap();
    let mut state = scorer.initial_state();
    for u in 0..=2 {
        for t in 0..4 {
            let row = scorer.log_probs(t, &state);
            for (a, b) in row.iter().zip(lattice.row(t * 3 + u)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        if u < 2 {
            state = scorer.advance(&state, target.0[u]);
        }
    }
}

#[test]
fn invalid_decode_arguments() {
    let model = FirstPassModel::new(tiny_config(1), 0).unwrap();
    let feats = random_features(&mut Rng::new(0), 3, 3);
    assert!(decode(&model, &feats, 0, 4).is_err());
    assert!(decode(&model, &feats, 1, 0).is_err());
}
