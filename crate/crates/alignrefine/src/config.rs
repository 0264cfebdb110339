//! Experiment config files.
//!
//! A file is TOML with the same nested sections as [`ExperimentConfig`].
//! Keys it leaves out take the built-in defaults, and commands write the
//! resolved config next to their outputs, so every run is fully spelled out.
//! Unknown keys and type mismatches are errors that name the key.

use std::fmt;
use std::path::Path;

use alignrefine_core::synth::TaskSpec;
use alignrefine_core::train::ExperimentConfig;
use anyhow::Context;
use toml::{Table, Value};

/// A config problem tied to one key. Maps to exit code 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Invalid {
    pub key: String,
    pub reason: String,
}

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid config `{}`: {}", self.key, self.reason)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(key: impl Into<String>, reason: impl Into<String>) -> anyhow::Error {
    Invalid { key: key.into(), reason: reason.into() }.into()
}

/// Whether an error is a validation failure rather than a runtime one.
pub fn is_validation(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<Invalid>() || matches!(e.downcast_ref::<alignrefine_core::Error>(), Some(alignrefine_core::Error::Config { .. }))
    })
}

fn kind(v: &Value) -> &'static str {
    v.type_str()
}

/// Overlays `over` on `base`. Every key of `over` must exist in `base` with
/// the same type; integers are accepted where floats are expected.
pub fn merge(base: &mut Table, over: &Table, prefix: &str) -> anyhow::Result<()> {
    for (k, v) in over {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let Some(slot) = base.get_mut(k) else {
            return Err(invalid(key, "unknown key"));
        };
        match (slot, v) {
            (Value::Table(b), Value::Table(o)) => merge(b, o, &key)?,
            (slot @ Value::Float(_), Value::Integer(i)) => *slot = Value::Float(*i as f64),
            (slot, v) if kind(slot) == kind(v) && !slot.is_table() => *slot = v.clone(),
            (slot, v) => return Err(invalid(key, format!("expected {}, found {}", kind(slot), kind(v)))),
        }
    }
    Ok(())
}

/// Sets one dotted key, e.g. `refiner.mask_prob`, with the same checks as
/// [`merge`].
pub fn set_key(table: &mut Table, dotted: &str, value: Value) -> anyhow::Result<()> {
    let mut over = Table::new();
    let mut parts: Vec<&str> = dotted.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut leaf = Table::new();
    leaf.insert(last.to_string(), value);
    let nested = parts.into_iter().rev().fold(leaf, |inner, p| {
        let mut t = Table::new();
        t.insert(p.to_string(), Value::Table(inner));
        t
    });
    over.extend(nested);
    merge(table, &over, "")
}

pub fn to_table(cfg: &ExperimentConfig) -> Table {
    Table::try_from(cfg).expect("config serializes to a table")
}

/// Turns a merged table back into a config and validates it.
pub fn from_table(table: Table) -> anyhow::Result<ExperimentConfig> {
    let cfg: ExperimentConfig = table.try_into().map_err(|e: toml::de::Error| invalid("config", e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Resolves config text against the defaults.
pub fn parse(text: &str) -> anyhow::Result<ExperimentConfig> {
    let over: Table = text.parse().map_err(|e: toml::de::Error| invalid("config", e.message().to_string()))?;
    let mut table = to_table(&ExperimentConfig::default());
    merge(&mut table, &over, "")?;
    from_table(table)
}

pub fn load(path: &Path) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse(&text).with_context(|| format!("in {}", path.display()))
}

/// Task spec from `default` or a TOML file holding the task fields.
pub fn load_task_spec(spec: &str) -> anyhow::Result<TaskSpec> {
    if spec == "default" {
        return Ok(TaskSpec::default());
    }
    let text = std::fs::read_to_string(spec).with_context(|| format!("reading task spec {spec}"))?;
    let over: Table = text.parse().map_err(|e: toml::de::Error| invalid("task", e.message().to_string()))?;
    let mut table = Table::try_from(TaskSpec::default()).expect("spec serializes");
    merge(&mut table, &over, "task")?;
    let spec: TaskSpec = table.try_into().map_err(|e: toml::de::Error| invalid("task", e.message().to_string()))?;
    spec.validate()?;
    Ok(spec)
}

pub fn to_toml(cfg: &ExperimentConfig) -> String {
    toml::to_string(cfg).expect("config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(err: anyhow::Error) -> String {
        if let Some(i) = err.downcast_ref::<Invalid>() {
            return i.key.clone();
        }
        match err.downcast_ref::<alignrefine_core::Error>() {
            Some(alignrefine_core::Error::Config { key, .. }) => key.clone(),
            _ => panic!("not a validation error: {err:#}"),
        }
    }

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(parse("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn round_trips_through_text() {
        let mut cfg = ExperimentConfig::default();
        cfg.refiner.mask_prob = 0.02;
        cfg.beam_size = 4;
        assert_eq!(parse(&to_toml(&cfg)).unwrap(), cfg);
    }

    #[test]
    fn partial_file_overrides_only_its_keys() {
        let cfg = parse("seed = 3\n[refiner]\ntrain_steps = 1\n[refiner_training.optimizer]\nlr = 1\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.refiner.train_steps, 1);
        assert_eq!(cfg.refiner_training.optimizer.lr, 1.0);
        assert_eq!(cfg.refiner.layers, ExperimentConfig::default().refiner.layers);
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(key_of(parse("[refiner]\nmask_probability = 0.1\n").unwrap_err()), "refiner.mask_probability");
        assert_eq!(key_of(parse("[refiner]\nmask_prob = \"high\"\n").unwrap_err()), "refiner.mask_prob");
        assert_eq!(key_of(parse("[refiner]\nmask_prob = 1.0\n").unwrap_err()), "refiner.mask_prob");
        assert_eq!(key_of(parse("[first_pass]\nheads = 5\n").unwrap_err()), "first_pass.heads");
        assert_eq!(key_of(parse("bogus = 1\n").unwrap_err()), "bogus");
        assert!(is_validation(&parse("[task\n").unwrap_err()));
    }

    #[test]
    fn set_key_reaches_nested_tables() {
        let mut t = to_table(&ExperimentConfig::default());
        set_key(&mut t, "refiner.cascade_layers", Value::Integer(2)).unwrap();
        set_key(&mut t, "beam_size", Value::Integer(4)).unwrap();
        let cfg = from_table(t.clone()).unwrap();
        assert_eq!((cfg.refiner.cascade_layers, cfg.beam_size), (2, 4));
        assert!(set_key(&mut t, "refiner.nope", Value::Integer(1)).is_err());
    }

    #[test]
    fn validation_errors_are_classified() {
        assert!(is_validation(&invalid("x", "y")));
        assert!(!is_validation(&anyhow::anyhow!("disk full")));
        let wrapped = parse("[refiner]\ndropout = 2.0\n").unwrap_err().context("loading");
        assert!(is_validation(&wrapped));
    }
}
