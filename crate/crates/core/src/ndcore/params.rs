use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

/// What a parameter is used for. Only weights are L2-regularized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Batch-norm scale or shift.
    Norm,
}

impl ParamKind {
    pub(crate) fn code(self) -> u8 {
        match self {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
            ParamKind::Norm => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ParamKind::Weight),
            1 => Some(ParamKind::Bias),
            2 => Some(ParamKind::Norm),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Running mean/variance of one batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of training-mode updates folded in so far.
    pub updates: u64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            updates: 0,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.updates > 0
    }

    /// Exponential moving average with the given momentum.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64], momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(batch_var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        self.updates += 1;
    }
}

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

/// All learnable weights of one model plus its batch-norm running statistics.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParameterSet {
    params: BTreeMap<String, Parameter>,
    running: BTreeMap<String, RunningStats>,
    /// Seed the weights were initialized from.
    pub seed: u64,
    /// Format version tag carried into checkpoints.
    pub version: u32,
}

impl ParameterSet {
    pub fn new(seed: u64) -> Self {
        ParameterSet {
            params: BTreeMap::new(),
            running: BTreeMap::new(),
            seed,
            version: 1,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.params.insert(name, Parameter { kind, value });
        Ok(())
    }

    pub fn insert_running(&mut self, name: impl Into<String>, stats: RunningStats) {
        self.running.insert(name.into(), stats);
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn running(&self, name: &str) -> Result<&RunningStats> {
        self.running
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn running_mut(&mut self, name: &str) -> Result<&mut RunningStats> {
        self.running
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn running_iter(&self) -> impl Iterator<Item = (&str, &RunningStats)> {
        self.running.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn param_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// `Σθ²` over the regularized (weight) entries.
    pub fn weight_sum_squares(&self) -> f64 {
        self.params
            .values()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.value.sum_squares())
            .sum()
    }

    /// SHA-256 over names and little-endian values of all parameters and
    /// running statistics.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.params {
            h.update(name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        for (name, r) in &self.running {
            h.update(name.as_bytes());
            for v in r.mean.iter().chain(&r.var) {
                h.update(v.to_le_bytes());
            }
            h.update(r.updates.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}
