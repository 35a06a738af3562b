use std::fmt;

use serde::{Deserialize, Serialize};

use crate::image::ImageShape;

/// Search space of the inversion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Input space only.
    #[serde(rename = "x")]
    X,
    /// Latent codes of a fixed generator.
    #[serde(rename = "z")]
    Z,
    /// Per-instance generator parameters from random fixed codes.
    #[serde(rename = "w")]
    W,
    /// Latent search, then input space from the decoded images.
    #[serde(rename = "z/x")]
    ZX,
    /// Latent search, then per-instance generator parameters.
    #[serde(rename = "z/w")]
    ZW,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::X, Mode::Z, Mode::W, Mode::ZX, Mode::ZW];

    pub fn needs_generator(self) -> bool {
        self != Mode::X
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::X => "x",
            Mode::Z => "z",
            Mode::W => "w",
            Mode::ZX => "z/x",
            Mode::ZW => "z/w",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode `{s}` (expected x, z, w, z/x or z/w)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DiscrepancyKind {
    #[serde(rename = "l2")]
    L2,
    #[serde(rename = "neg-cosine")]
    NegCosine,
}

impl DiscrepancyKind {
    /// The cost of a perfect gradient match.
    pub fn self_match(self) -> f64 {
        match self {
            DiscrepancyKind::L2 => 0.0,
            DiscrepancyKind::NegCosine => -1.0,
        }
    }
}

/// Search settings. Adam uses `β = (0.9, 0.999)` and every phase decays its
/// learning rate by 0.1 at 3/8, 5/8 and 7/8 of its iterations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    pub mode: Mode,
    pub discrepancy: DiscrepancyKind,
    /// Latent-search iterations (modes z, z/x, z/w).
    pub z_iterations: usize,
    /// Iterations of the input or parameter phase (modes x, w, z/x, z/w).
    pub iterations: usize,
    pub eta_z: f64,
    pub eta_w: f64,
    pub eta_x: f64,
    pub lambda_tv: f64,
    /// Weight of the BN-statistics term, used only when the task carries
    /// statistics.
    pub lambda_bn: f64,
    pub restarts: usize,
    pub seed: u64,
    pub image: ImageShape,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            mode: Mode::ZW,
            discrepancy: DiscrepancyKind::NegCosine,
            z_iterations: 400,
            iterations: 400,
            eta_z: 3e-2,
            eta_w: 1e-3,
            eta_x: 1e-1,
            lambda_tv: 1e-4,
            lambda_bn: 1e-3,
            restarts: 4,
            seed: 0,
            image: ImageShape::GRAY16,
        }
    }
}

impl InversionConfig {
    /// Every violated field, prefixed with `prefix`.
    pub fn validate(&self, prefix: &str) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [("eta_z", self.eta_z), ("eta_w", self.eta_w), ("eta_x", self.eta_x)] {
            if !(v > 0.0 && v.is_finite()) {
                errs.push(format!("{prefix}{name} must be > 0, got {v}"));
            }
        }
        for (name, v) in [("lambda_tv", self.lambda_tv), ("lambda_bn", self.lambda_bn)] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("{prefix}{name} must be >= 0, got {v}"));
            }
        }
        if self.iterations == 0 {
            errs.push(format!("{prefix}iterations must be >= 1"));
        }
        if self.z_iterations == 0 {
            errs.push(format!("{prefix}z_iterations must be >= 1"));
        }
        if self.restarts == 0 {
            errs.push(format!("{prefix}restarts must be >= 1"));
        }
        if self.image.is_empty() {
            errs.push(format!("{prefix}image dimensions must be positive"));
        }
        errs
    }
}
