//! Run configuration: one JSON file plus flag overrides.

use std::path::Path;

use flatformer::features::{CleanConfig, SplitConfig};
use flatformer::model::ModelConfig;
use flatformer::synth::SynthConfig;
use flatformer::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub batch_size: usize,
    pub warmup: usize,
    pub reps: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            batch_size: 64,
            warmup: 3,
            reps: 20,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub precision: Precision,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub clean: CleanConfig,
    pub split: SplitConfig,
    pub synth: SynthConfig,
    pub bench: BenchConfig,
}

/// One `path = value` assignment requested on the command line.
#[derive(Clone, Debug)]
pub struct Override {
    pub flag: String,
    pub path: Vec<String>,
    pub value: Value,
}

impl Override {
    pub fn new(flag: &str, path: &str, value: Value) -> Self {
        Override {
            flag: flag.to_string(),
            path: path.split('.').map(str::to_string).collect(),
            value,
        }
    }

    /// Parse `--set a.b=value`; the value is JSON if it parses, else a string.
    pub fn parse_set(raw: &str) -> Result<Self, CliError> {
        let (path, value) = raw
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {raw:?}")))?;
        let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        Ok(Override::new(&format!("--set {path}"), path.trim(), value))
    }
}

fn lookup<'a>(v: &'a Value, path: &[String]) -> Option<&'a Value> {
    path.iter().try_fold(v, |v, k| v.get(k))
}

fn assign(v: &mut Value, path: &[String], value: Value) {
    let mut cur = v;
    for k in &path[..path.len() - 1] {
        if !cur.get(k).is_some_and(Value::is_object) {
            cur[k.as_str()] = Value::Object(Default::default());
        }
        cur = &mut cur[k.as_str()];
    }
    cur[path[path.len() - 1].as_str()] = value;
}

fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

fn numbers_equal(a: &Value, b: &Value) -> bool {
    match (a.as_f64(), b.as_f64()) {
        (Some(x), Some(y)) => x == y,
        _ => a == b,
    }
}

fn values_equal(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Array(x), Value::Array(y)) => x.len() == y.len() && x.iter().zip(y).all(|(a, b)| values_equal(a, b)),
        _ => numbers_equal(a, b),
    }
}

/// The config file's values, the overrides applied on top, and the
/// resolved configuration.
pub struct Resolved {
    pub config: RunConfig,
    pub file: Option<Value>,
}

/// Merge defaults, the config file and the overrides. An override that
/// disagrees with a value written in the config file is a usage error.
pub fn resolve(path: Option<&Path>, overrides: &[Override]) -> Result<Resolved, CliError> {
    let file = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {} is not JSON: {e}", p.display())))?;
            if !v.is_object() {
                return Err(CliError::Usage(format!("config {} must be a JSON object", p.display())));
            }
            Some(v)
        }
        None => None,
    };
    let mut conflicts = Vec::new();
    for (i, a) in overrides.iter().enumerate() {
        for b in &overrides[..i] {
            if a.path == b.path && !values_equal(&a.value, &b.value) {
                conflicts.push(format!("{} = {} but {} = {}", a.flag, a.value, b.flag, b.value));
            }
        }
    }
    if let Some(f) = &file {
        for o in overrides {
            if let Some(existing) = lookup(f, &o.path) {
                if !values_equal(existing, &o.value) {
                    conflicts.push(format!("{} = {} but config sets {} = {}", o.flag, o.value, o.path.join("."), existing));
                }
            }
        }
    }
    if !conflicts.is_empty() {
        return Err(CliError::Usage(format!("conflicting settings:\n  {}", conflicts.join("\n  "))));
    }
    let mut merged = serde_json::to_value(RunConfig::default()).expect("default config serializes");
    if let Some(f) = &file {
        merge(&mut merged, f);
    }
    for o in overrides {
        if lookup(&merged, &o.path).is_none() {
            return Err(CliError::Usage(format!("{}: unknown setting {}", o.flag, o.path.join("."))));
        }
        assign(&mut merged, &o.path, o.value.clone());
    }
    let config: RunConfig = serde_json::from_value(merged).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))?;
    config.model.validate().map_err(CliError::from_config)?;
    config.train.validate().map_err(CliError::from_config)?;
    config.synth.validate().map_err(CliError::from_config)?;
    Ok(Resolved { config, file })
}

impl Resolved {
    /// Whether the config file itself sets `path`.
    pub fn file_sets(&self, path: &str) -> Option<&Value> {
        let path: Vec<String> = path.split('.').map(str::to_string).collect();
        self.file.as_ref().and_then(|f| lookup(f, &path))
    }
}
