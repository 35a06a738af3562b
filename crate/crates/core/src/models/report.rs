use autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-channel batch statistics of the post-activation feature maps of each
/// hidden layer. Variances are population variances.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub means: Vec<Tensor>,
    pub variances: Vec<Tensor>,
}

impl BnStats {
    pub fn layers(&self) -> usize {
        self.means.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.means.len() != self.variances.len() {
            return Err(Error::Shape(format!(
                "{} mean layers vs {} variance layers",
                self.means.len(),
                self.variances.len()
            )));
        }
        for (m, v) in self.means.iter().zip(&self.variances) {
            if m.shape() != v.shape() {
                return Err(Error::Shape(format!("mean {:?} vs variance {:?}", m.shape(), v.shape())));
            }
            if v.data().iter().any(|&x| x < 0.0) {
                return Err(Error::Shape("negative variance".into()));
            }
        }
        Ok(())
    }
}

/// What an attacker observes from one node in one round: the averaged
/// parameter gradient, optionally with labels and batch statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    /// Fingerprint of the parameter snapshot the gradient was taken at.
    pub model_id: String,
    /// One tensor per parameter, in model parameter order.
    pub gradients: Vec<Tensor>,
    pub batch_size: usize,
    pub labels: Option<Vec<usize>>,
    pub bn_stats: Option<BnStats>,
    pub round: usize,
    pub node: usize,
}

impl GradientReport {
    /// Total number of gradient entries.
    pub fn len(&self) -> usize {
        self.gradients.iter().map(Tensor::numel).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All gradients concatenated in parameter order.
    pub fn flat(&self) -> Vec<f64> {
        self.gradients.iter().flat_map(|g| g.data().iter().copied()).collect()
    }

    /// Checks gradient shapes against a parameter shape list.
    pub fn check_shapes(&self, shapes: &[Vec<usize>]) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::EmptyBatch);
        }
        if self.gradients.len() != shapes.len()
            || self.gradients.iter().zip(shapes).any(|(g, s)| g.shape() != s.as_slice())
        {
            return Err(Error::Shape(format!(
                "report gradients {:?} do not match parameters {:?}",
                self.gradients.iter().map(|g| g.shape().to_vec()).collect::<Vec<_>>(),
                shapes
            )));
        }
        if let Some(l) = &self.labels {
            if l.len() != self.batch_size {
                return Err(Error::Shape(format!(
                    "{} labels for batch size {}",
                    l.len(),
                    self.batch_size
                )));
            }
        }
        Ok(())
    }
}

/// Defense transformations applied to a report before the attacker sees it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseConfig {
    /// Fraction of smallest-magnitude entries zeroed per layer, in `[0, 1)`.
    pub sparsity: f64,
    /// Standard deviation of additive gaussian noise.
    pub noise: f64,
    pub batch_size: usize,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            sparsity: 0.0,
            noise: 0.0,
            batch_size: 4,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(0.0..1.0).contains(&self.sparsity) {
            errs.push(format!("defense.sparsity must be in [0, 1), got {}", self.sparsity));
        }
        if !(self.noise >= 0.0) {
            errs.push(format!("defense.noise must be >= 0, got {}", self.noise));
        }
        if self.batch_size == 0 {
            errs.push("defense.batch_size must be >= 1".into());
        }
        errs
    }

    pub fn is_identity(&self) -> bool {
        self.sparsity == 0.0 && self.noise == 0.0
    }
}
