use super::*;
use crate::synth::{generate_corpus, Split};

fn tiny() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.task = TaskSpec { min_length: 2, max_length: 4, train_size: 16, dev_size: 4, test_size: 4, ..TaskSpec::default() };
    c.first_pass = FirstPassConfig { dim: 8, layers: 1, heads: 2, ffn_hidden: 16, ..c.first_pass };
    c.refiner = RefineConfig { dim: 8, layers: 1, heads: 2, ffn_hidden: 16, train_steps: 2, infer_steps: 2, ..RefineConfig::default() };
    for t in [&mut c.first_pass_training, &mut c.refiner_training] {
        t.max_steps = 20;
        t.eval_every = 10;
        t.batch_size = 4;
    }
    c
}

fn corpora(c: &ExperimentConfig) -> (Vec<Utterance>, Vec<Utterance>) {
    let task = c.task.build().unwrap();
    (
        generate_corpus(&task, Split::Train, c.task.train_size, c.seed).unwrap(),
        generate_corpus(&task, Split::Dev, c.task.dev_size, c.seed).unwrap(),
    )
}

#[test]
fn memorizes_one_utterance() {
    let mut c = tiny();
    c.first_pass.dim = 16;
    c.first_pass.ffn_hidden = 32;
    let t = &mut c.first_pass_training;
    t.max_steps = 300;
    t.eval_every = 300;
    t.batch_size = 1;
    t.spec_augment = SpecAugmentConfig::OFF;
    t.optimizer.lr = 1e-2;
    t.optimizer.warmup_steps = 10;
    let (train, _) = corpora(&c);
    let one = &train[..1];
    let fp = train_first_pass(&c, one, one, &mut ()).unwrap();
    let loss = first_pass_loss(&fp.model, one).unwrap();
    assert!(loss < 0.1, "loss {loss}");
    let eval = evaluate(&fp.model, None, one, 0, 1).unwrap();
    assert_eq!(eval.decodes[0].first, one[0].target);
}

#[test]
fn fixed_seed_reproduces_both_passes() {
    let c = tiny();
    let (train, dev) = corpora(&c);
    let a = train_first_pass(&c, &train, &dev, &mut ()).unwrap();
    let b = train_first_pass(&c, &train, &dev, &mut ()).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_eq!(params_fingerprint(&a.model.params), params_fingerprint(&b.model.params));
    assert_eq!(a.rng, b.rng);
    let ra = train_refiner(&c, &a.model, &train, &dev, &mut ()).unwrap();
    let rb = train_refiner(&c, &a.model, &train, &dev, &mut ()).unwrap();
    assert_eq!(ra.rows, rb.rows);
    assert_eq!(params_fingerprint(&ra.model.params), params_fingerprint(&rb.model.params));
}

#[test]
fn seed_changes_training() {
    let c = tiny();
    let (train, dev) = corpora(&c);
    let a = train_first_pass(&c, &train, &dev, &mut ()).unwrap();
    let b = train_first_pass(&ExperimentConfig { seed: 8, ..c }, &train, &dev, &mut ()).unwrap();
    assert_ne!(params_fingerprint(&a.model.params), params_fingerprint(&b.model.params));
}

#[test]
fn dev_wer_beats_blank_only_output() {
    let mut c = tiny();
    c.task.train_size = 200;
    c.task.dev_size = 20;
    c.first_pass.dim = 16;
    c.first_pass.ffn_hidden = 32;
    c.first_pass_training.max_steps = 300;
    c.first_pass_training.eval_every = 100;
    c.first_pass_training.optimizer.lr = 5e-3;
    let (train, dev) = corpora(&c);
    let fp = train_first_pass(&c, &train, &dev, &mut ()).unwrap();
    let wer = evaluate(&fp.model, None, &dev, 0, 1).unwrap().wer_first();
    assert!(wer < 100.0, "wer {wer}");
}

#[test]
fn refiner_training_leaves_first_pass_untouched() {
    let c = tiny();
    let (train, dev) = corpora(&c);
    let fp = train_first_pass(&c, &train, &dev, &mut ()).unwrap();
    let before = params_fingerprint(&fp.model.params);
    let rf = train_refiner(&c, &fp.model, &train, &dev, &mut ()).unwrap();
    assert_eq!(params_fingerprint(&fp.model.params), before);
    assert_ne!(params_fingerprint(&rf.model.params), before);
}

#[test]
fn evaluation_is_pure_and_has_one_column_per_step() {
    let c = tiny();
    let (train, dev) = corpora(&c);
    let fp = train_first_pass(&c, &train, &dev, &mut ()).unwrap();
    let rf = train_refiner(&c, &fp.model, &train, &dev, &mut ()).unwrap();
    let one = evaluate(&fp.model, Some(&rf.model), &dev, 1, 1).unwrap();
    assert_eq!(one.wer_steps().len(), 1);
    let a = evaluate(&fp.model, Some(&rf.model), &dev, 3, 1).unwrap();
    let b = evaluate(&fp.model, Some(&rf.model), &dev, 3, 1).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.wer_steps().len(), 3);
    assert_eq!(a.wer_first().to_bits(), one.wer_first().to_bits());
    assert_eq!(a.wer_steps()[0].to_bits(), one.wer_steps()[0].to_bits());
    for row in &rf.rows {
        assert_eq!(row.wer_steps.len(), c.refiner.infer_steps);
        assert!(row.wer_first >= 0.0 && row.wer_steps.iter().all(|w| *w >= 0.0));
    }
}

#[test]
fn a_fixed_point_alignment_stays_fixed() {
    let c = tiny();
    let (train, dev) = corpora(&c);
    let fp = train_first_pass(&c, &train, &dev, &mut ()).unwrap();
    let rf = train_refiner(&c, &fp.model, &train, &dev, &mut ()).unwrap();
    let eval = evaluate(&fp.model, Some(&rf.model), &dev, 5, 1).unwrap();
    for d in &eval.decodes {
        if let Some(k) = (1..d.step_alignments.len()).find(|&k| d.step_alignments[k] == d.step_alignments[k - 1]) {
            for later in &d.step_alignments[k..] {
                assert_eq!(later, &d.step_alignments[k]);
            }
            for later in &d.steps[k..] {
                assert_eq!(later, &d.steps[k]);
            }
        }
    }
}

#[test]
fn mask_probability_one_is_rejected() {
    let mut c = tiny();
    c.refiner.mask_prob = 1.0;
    let (train, dev) = corpora(&c);
    let fp = FirstPassModel::new(c.first_pass.clone(), c.seed).unwrap();
    let err = train_refiner(&c, &fp, &train, &dev, &mut ()).unwrap_err();
    assert!(matches!(err, Error::Config { ref key, .. } if key == "refiner.mask_prob"), "{err:?}");
}

#[test]
fn config_validation_names_the_key() {
    let mut c = tiny();
    c.first_pass_training.batch_size = 0;
    assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "first_pass_training.batch_size"));
    let mut c = tiny();
    c.first_pass.feature_dim = 3;
    assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "first_pass.feature_dim"));
    let mut c = tiny();
    c.beam_size = 0;
    assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "beam_size"));
    assert!(ExperimentConfig::default().validate().is_ok());
}

#[test]
fn empty_corpora_are_rejected() {
    let c = tiny();
    let (train, _) = corpora(&c);
    assert!(train_first_pass(&c, &train, &[], &mut ()).is_err());
    assert!(train_first_pass(&c, &[], &train, &mut ()).is_err());
}

#[test]
fn observer_sees_every_eval_row() {
    let c = tiny();
    let (train, dev) = corpora(&c);
    let mut seen = Vec::new();
    let fp = train_first_pass(&c, &train, &dev, &mut |r: &MetricsRow| seen.push(r.clone())).unwrap();
    assert_eq!(seen, fp.rows);
    assert_eq!(seen.iter().map(|r| r.step).collect::<Vec<_>>(), [10, 20]);
}

#[test]
fn batches_visit_each_utterance_once_per_epoch() {
    let mut b = Batches::new(10, 3);
    let mut first: Vec<usize> = (0..2).flat_map(|_| b.next(5)).collect();
    let mut second: Vec<usize> = (0..2).flat_map(|_| b.next(5)).collect();
    assert_ne!(first, second);
    first.sort_unstable();
    second.sort_unstable();
    assert_eq!(first, (0..10).collect::<Vec<_>>());
    assert_eq!(second, first);
    assert_eq!(Batches::new(3, 0).next(8).len(), 3);
}

#[test]
fn early_stopping_keeps_the_best_snapshot() {
    let mut p = Params::new();
    let mut s = Stopper::new(1);
    assert!(!s.record(1, 3.0, &p));
    p.add_filled("w", &[1], 0.0).unwrap();
    assert!(!s.record(2, 4.0, &p));
    assert!(s.record(3, 3.5, &p));
    assert_eq!(s.best_step, 1);
    assert_eq!(s.best_params.unwrap().len(), 0);
}

#[test]
fn non_finite_loss_is_reported() {
    assert!(matches!(check_finite(4, f64::NAN), Err(Error::Diverged { step: 4, .. })));
    assert!(check_finite(4, 1.5).is_ok());
}

#[test]
fn fingerprint_depends_on_values() {
    let mut p = Params::new();
    let id = p.add_filled("w", &[2], 0.0).unwrap();
    let a = params_fingerprint(&p);
    assert_eq!(a.len(), 64);
    p.get_mut(id).value.data_mut()[1] = 1e-300;
    assert_ne!(params_fingerprint(&p), a);
}
