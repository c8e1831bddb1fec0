use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Named trainable tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct SnapshotEntry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    params: Vec<SnapshotEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t.with_grad(true));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Places every parameter on `tape` as a grad-enabled leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bindings<'t> {
        Bindings {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
                .collect(),
        }
    }

    /// Places every parameter on `tape` as a constant (no gradients).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bindings<'t> {
        Bindings {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
                .collect(),
        }
    }

    /// `θ ← θ − lr·g` for every parameter with a gradient.
    pub fn sgd_step(&mut self, bindings: &Bindings<'_>, grads: &Gradients, lr: f64) {
        for (name, t) in self.entries.iter_mut() {
            if let Some(g) = bindings.vars.get(name).and_then(|v| grads.get(*v)) {
                for (p, gi) in t.values_mut().iter_mut().zip(g.values()) {
                    *p -= lr * gi;
                }
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let snap = Snapshot {
            params: self
                .entries
                .iter()
                .map(|(k, v)| SnapshotEntry {
                    name: k.clone(),
                    shape: v.shape().to_vec(),
                    values: v.values().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&snap)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let snap: Snapshot = serde_json::from_str(s)?;
        let mut store = ParamStore::new();
        for e in snap.params {
            store.insert(e.name, Tensor::new(e.shape, e.values)?);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Parameters of a [`ParamStore`] placed on one tape.
pub struct Bindings<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bindings<'t> {
    pub fn from_vars(names: &[String], vars: &[Var<'t>]) -> Self {
        Bindings {
            vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }
}
