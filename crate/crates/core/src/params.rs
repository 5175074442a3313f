//! Named parameter collections and their vector-space arithmetic.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Which module of the translator a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Embedding,
    Encoder,
    Decoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub partition: Partition,
    pub value: Tensor,
}

/// Gradients (or any other per-parameter tensors) keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

/// Names of the parameters an update is allowed to touch.
pub type TrainableSet = BTreeSet<String>;

/// Graph handles for a parameter set, keyed by name.
pub type ParamVars = BTreeMap<String, Var>;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, partition: Partition, value: Tensor) {
        self.entries.insert(name.into(), ParamEntry { partition, value });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn partition(&self, name: &str) -> Option<Partition> {
        self.entries.get(name).map(|e| e.partition)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars, optionally restricted to `only`.
    pub fn num_scalars(&self, only: Option<&TrainableSet>) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| only.is_none_or(|s| s.contains(*n)))
            .map(|(_, e)| e.value.numel())
            .sum()
    }

    pub fn all_names(&self) -> TrainableSet {
        self.entries.keys().cloned().collect()
    }

    fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::InvalidArgument(format!(
                "parameter sets differ in size ({} vs {})",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, a), (nb, b)) in self.entries.iter().zip(&other.entries) {
            if na != nb {
                return Err(Error::InvalidArgument(format!(
                    "parameter names differ: `{na}` vs `{nb}`"
                )));
            }
            if a.value.shape() != b.value.shape() {
                return Err(Error::shape("param_set", a.value.shape(), b.value.shape()));
            }
        }
        Ok(())
    }

    /// `self += alpha * other`, over every shared name.
    pub fn axpy(&mut self, alpha: f64, other: &ParamSet) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.entries.values_mut().zip(other.entries.values()) {
            a.value.axpy(alpha, &b.value)?;
        }
        Ok(())
    }

    /// `self += alpha * grads[name]` for every name present in `grads`.
    pub fn axpy_map(&mut self, alpha: f64, grads: &GradMap) -> Result<()> {
        for (name, g) in grads {
            self.get_mut(name)?.axpy(alpha, g)?;
        }
        Ok(())
    }

    pub fn add(&self, other: &ParamSet) -> Result<ParamSet> {
        let mut out = self.clone();
        out.axpy(1.0, other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &ParamSet) -> Result<ParamSet> {
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    pub fn scale(&self, c: f64) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, e)| {
                    (
                        n.clone(),
                        ParamEntry {
                            partition: e.partition,
                            value: e.value.scaled(c),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> ParamSet {
        self.scale(0.0)
    }

    pub fn sq_norm(&self) -> f64 {
        self.entries.values().map(|e| e.value.sq_norm()).sum()
    }

    /// Euclidean distance over all entries.
    pub fn distance(&self, other: &ParamSet) -> Result<f64> {
        Ok(self.sub(other)?.sq_norm().sqrt())
    }

    /// Registers every entry on `graph`: names in `trainable` become
    /// differentiable leaves, the rest constants.
    pub fn register(&self, graph: &mut Graph, trainable: &TrainableSet) -> ParamVars {
        self.entries
            .iter()
            .map(|(name, e)| {
                let v = if trainable.contains(name) {
                    graph.param(name.clone(), e.value.clone())
                } else {
                    graph.constant(e.value.clone())
                };
                (name.clone(), v)
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(|e| e.value.is_finite())
    }
}

pub fn grad_sq_norm(g: &GradMap) -> f64 {
    g.values().map(Tensor::sq_norm).sum()
}

/// `a - b` over the names of `a`; names missing in `b` count as zero.
pub fn grad_sub(a: &GradMap, b: &GradMap) -> Result<GradMap> {
    let mut out = a.clone();
    for (name, t) in out.iter_mut() {
        if let Some(o) = b.get(name) {
            t.axpy(-1.0, o)?;
        }
    }
    Ok(out)
}

/// `acc += g`, inserting names not yet present.
pub fn grad_accumulate(acc: &mut GradMap, g: &GradMap) -> Result<()> {
    for (name, t) in g {
        match acc.get_mut(name) {
            Some(a) => a.add_assign(t)?,
            None => {
                acc.insert(name.clone(), t.clone());
            }
        }
    }
    Ok(())
}
