//! Resolved run configuration and its flat `key = value` text form.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::detector::ModelConfig;
use crate::error::{Error, Result};
use crate::trainer::{Phase, TrainConfig};
use crate::world::WorldConfig;

/// Model fields copied from the world configuration; not settable.
pub const DERIVED_KEYS: [&str; 3] = ["model.dim", "model.n_classes", "model.attention.model_dim"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub k_train: usize,
    pub k_eval: usize,
    pub base_iterations: usize,
    pub finetune_iterations: usize,
    pub lr: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            k_train: 3,
            k_eval: 5,
            base_iterations: 2000,
            finetune_iterations: 500,
            lr: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// Held-out test scenes scored per run.
    pub scenes: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { scenes: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Seeds per multi-run experiment: `seed, seed + 1, ...`.
    pub runs: usize,
    pub out: String,
    /// Worker threads for multi-seed experiments; 0 uses every core.
    pub threads: usize,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            seed: 0,
            runs: 10,
            out: "out".into(),
            threads: 0,
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            train: TrainSettings::default(),
            eval: EvalSettings::default(),
        };
        cfg.sync_derived();
        cfg
    }
}

fn config_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn flatten_into(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, child, out);
            }
        }
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        Value::Array(items) => {
            let parts: Vec<String> = items.iter().map(scalar_text).collect();
            out.push((prefix.to_string(), parts.join(",")));
        }
        other => out.push((prefix.to_string(), scalar_text(other))),
    }
}

fn scalar_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Parses `text` into a JSON value of the same kind as `current`.
fn parse_like(current: &Value, text: &str, key: &str) -> Result<Value> {
    let text = text.trim();
    let ill = |what: &str| config_err(key, format!("expected {what}, got `{text}`"));
    Ok(match current {
        Value::Bool(_) => Value::Bool(text.parse().map_err(|_| ill("true or false"))?),
        Value::Number(n) if n.is_u64() => Value::from(text.parse::<u64>().map_err(|_| ill("a non-negative integer"))?),
        Value::Number(n) if n.is_i64() => Value::from(text.parse::<i64>().map_err(|_| ill("an integer"))?),
        Value::Number(_) => {
            let x: f64 = text.parse().map_err(|_| ill("a number"))?;
            if !x.is_finite() {
                return Err(ill("a finite number"));
            }
            Value::from(x)
        }
        Value::String(_) => Value::String(text.to_string()),
        Value::Array(items) => {
            let proto = items.first().cloned().unwrap_or(Value::from(0u64));
            let parts: Vec<Value> = text
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| parse_like(&proto, s, key))
                .collect::<Result<_>>()?;
            Value::Array(parts)
        }
        Value::Object(_) => return Err(config_err(key, "is a section, not a value")),
        Value::Null => return Err(config_err(key, "has no settable value")),
    })
}

fn slot<'a>(root: &'a mut Value, key: &str) -> Result<&'a mut Value> {
    let mut node = root;
    for part in key.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(part),
            _ => None,
        }
        .ok_or_else(|| config_err(key, "unknown key"))?;
    }
    Ok(node)
}

impl RunConfig {
    /// Copies the world width and class count into the model.
    fn sync_derived(&mut self) {
        self.model.dim = self.world.dim;
        self.model.attention.model_dim = self.world.dim;
        self.model.n_classes = self.world.n_classes();
    }

    /// Applies one dotted override; the key must exist and the value must
    /// parse as that key's type.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        if DERIVED_KEYS.contains(&key) {
            return Err(config_err(key, "derived from the world section; set world.dim / world.n_base / world.n_novel"));
        }
        let mut root = serde_json::to_value(&*self)?;
        let node = slot(&mut root, key)?;
        *node = parse_like(node, value, key)?;
        let mut next: RunConfig = serde_json::from_value(root).map_err(|e| config_err(key, e.to_string()))?;
        next.sync_derived();
        *self = next;
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err(&format!("line {}", n + 1), format!("expected `key = value`, got `{line}`")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Defaults, then the file, then each `key=value` override in order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            cfg.apply_text(&std::fs::read_to_string(path)?)?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| config_err(o, "override must look like key=value"))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every settable key with its current value, sorted by key.
    pub fn flat(&self) -> Vec<(String, String)> {
        let v = serde_json::to_value(self).unwrap_or(Value::Object(Map::new()));
        let mut out = Vec::new();
        flatten_into("", &v, &mut out);
        out.retain(|(k, _)| !DERIVED_KEYS.contains(&k.as_str()));
        out.sort();
        out
    }

    /// The flat text form; [`RunConfig::apply_text`] reads it back.
    pub fn to_text(&self) -> String {
        self.flat().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn to_json_value(&self) -> Value {
        serde_json::to_value(self).unwrap_or(Value::Null)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.train_config(Phase::Base, self.seed).validate()?;
        if self.runs == 0 {
            return Err(config_err("runs", "must be >= 1"));
        }
        if self.eval.scenes == 0 {
            return Err(config_err("eval.scenes", "must be >= 1"));
        }
        if self.out.trim().is_empty() {
            return Err(config_err("out", "must name a directory"));
        }
        Ok(())
    }

    /// Trainer settings for one phase of one seed.
    pub fn train_config(&self, phase: Phase, seed: u64) -> TrainConfig {
        TrainConfig {
            phase,
            k_train: self.train.k_train,
            k_eval: self.train.k_eval,
            iterations: match phase {
                Phase::Base => self.train.base_iterations,
                Phase::Finetune => self.train.finetune_iterations,
            },
            lr: self.train.lr,
            seed,
            style: self.model.style,
            prototype_mode: self.model.prototype_mode,
            baseline_variant: self.model.baseline_variant,
        }
    }

    /// Seeds of a multi-run experiment.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.runs as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }
}
