use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alignrefine")).args(args).output().expect("spawn cli")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"
seed = 3

[task]
train_size = 12
dev_size = 4
test_size = 4

[first_pass]
dim = 8
layers = 1
heads = 2
ffn_hidden = 16

[refiner]
dim = 8
layers = 1
heads = 2
ffn_hidden = 16
train_steps = 2
infer_steps = 2

[first_pass_training]
max_steps = 6
eval_every = 3
batch_size = 4

[refiner_training]
max_steps = 6
eval_every = 3
batch_size = 4
"#;

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.toml");
    std::fs::write(&p, SMALL).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn help_lists_every_subcommand() {
    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for cmd in ["gen-data", "train-first-pass", "train-refiner", "decode", "evaluate", "ablate", "verify"] {
        assert!(text.contains(cmd), "help is missing {cmd}");
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["verify", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn bad_config_is_a_validation_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[refiner]\nmask_prob = 1.5\n").unwrap();
    let o = run(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("d").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("refiner.mask_prob"), "{}", stderr(&o));

    std::fs::write(&cfg, "[refiner]\nmask_probability = 0.1\n").unwrap();
    let o = run(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("d").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("mask_probability"), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let o = run(&["evaluate", "--first", &p("nope"), "--corpus", &p("dev.corpus")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_data_is_reproducible_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let a = run(&["gen-data", "--config", &cfg, "--out", &p("a")]);
    let b = run(&["gen-data", "--config", &cfg, "--out", &p("b")]);
    let c = run(&["gen-data", "--config", &cfg, "--out", &p("c"), "--seed", "4"]);
    assert!(a.status.success());
    let lines: Vec<String> = stdout(&a).lines().map(String::from).collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("train 12 "));
    assert_eq!(stdout(&a), stdout(&b));
    assert_ne!(stdout(&a), stdout(&c));
    assert_eq!(std::fs::read(p("a/dev.corpus")).unwrap(), std::fs::read(p("b/dev.corpus")).unwrap());
}

#[test]
fn verify_single_suite_prints_its_line() {
    let o = run(&["verify", "--suite", "ctc-oracle", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("ctc-oracle"));
    assert!(text.contains("PASS"));
    assert!(text.contains("200/200 matched < 1e-6"));
    assert_eq!(run(&["verify", "--suite", "nonsense"]).status.code(), Some(1));
}

#[test]
fn full_small_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    assert!(run(&["gen-data", "--config", &cfg, "--out", &p("data")]).status.success());
    let o = run(&["train-first-pass", "--config", &cfg, "--data", &p("data"), "--out", &p("fp")]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(Path::new(&p("fp/first_pass.manifest")).exists());
    assert!(Path::new(&p("fp/config.toml")).exists());
    let o = run(&["train-refiner", "--data", &p("data"), "--first", &p("fp/first_pass"), "--out", &p("rf")]);
    assert!(o.status.success(), "{}", stderr(&o));

    let metrics = std::fs::read_to_string(p("rf/refiner_metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("step,split,loss,wer_first,wer_step1,wer_step2,skips,wall_s"));
    assert_eq!(lines.count(), 2);

    let o = run(&["decode", "--first", &p("fp/first_pass"), "--refiner", &p("rf/refiner"), "--corpus", &p("data/dev.corpus"), "--utt", "dev-0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("utt dev-0\nref "));
    assert!(text.contains("\nstep2 "));
    assert!(!text.contains("\nstep3 "));

    let o = run(&["decode", "--first", &p("fp/first_pass"), "--corpus", &p("data/dev.corpus"), "--utt", "dev-99"]);
    assert_eq!(o.status.code(), Some(1));

    #[rustfmt::skip]
    let o = run(&["evaluate", "--first", &p("fp/first_pass"), "--refiner", &p("rf/refiner"), "--corpus", &p("data/test.corpus"),
                  "--steps", "3", "--fixed-wall-time"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "step,split,loss,wer_first,wer_step1,wer_step2,wer_step3,skips,wall_s");
    assert!(rows[1].contains(",test,") && rows[1].ends_with(",0.000"));

    std::fs::write(p("grid.toml"), "[grid]\n\"refiner.mask_prob\" = [0.0, 0.1]\n").unwrap();
    #[rustfmt::skip]
    let args = ["ablate", "--grid", &p("grid.toml"), "--data", &p("data"), "--first", &p("fp/first_pass"),
                "--out", &p("grid.csv"), "--plot", &p("grid.svg"), "--fixed-wall-time"];
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(p("grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    assert!(std::fs::read_to_string(p("grid.svg")).unwrap().matches("<polyline").count() == 2);
    let again = run(&args);
    assert!(stdout(&again).contains("skipped"));
    assert_eq!(std::fs::read_to_string(p("grid.csv")).unwrap(), csv);
}
