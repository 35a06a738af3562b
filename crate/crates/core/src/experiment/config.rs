use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flsim::{DatasetRecipe, ThetaSchedule};
use crate::inversion::InversionConfig;
use crate::meta::MetaConfig;
use crate::models::{Activation, DefenseConfig, FitConfig};
use crate::rgap::LatentFit;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Invert,
    Giml,
    Rgap,
    Sweep,
    Multigrad,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Invert => "invert",
            Command::Giml => "giml",
            Command::Rgap => "rgap",
            Command::Sweep => "sweep",
            Command::Multigrad => "multigrad",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `mlp3` or `cnn4`.
    pub preset: String,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { preset: "cnn4".into(), seed: 3 }
    }
}

/// Where the attack's generator comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum GeneratorSource {
    /// Freshly initialized decoder.
    PresetUntrained { seed: u64 },
    /// A saved generator container.
    File { path: PathBuf },
    /// The generator written by an earlier `giml` run.
    GimlOutput { run: PathBuf, seed: u64 },
    /// A decoder fitted to example images of a dataset.
    Fitted {
        #[serde(default)]
        dataset: DatasetRecipe,
        #[serde(default)]
        fit: FitConfig,
        #[serde(default)]
        seed: u64,
    },
}

impl Default for GeneratorSource {
    fn default() -> Self {
        GeneratorSource::PresetUntrained { seed: 0 }
    }
}

impl GeneratorSource {
    /// The file this source reads, if any.
    pub fn file(&self) -> Option<PathBuf> {
        match self {
            GeneratorSource::File { path } => Some(path.clone()),
            GeneratorSource::GimlOutput { run, seed } => Some(run.join(format!("seed_{seed}")).join("generator.gen")),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub nodes: usize,
    pub rounds: usize,
    pub schedule: ThetaSchedule,
    pub with_bn: bool,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self { nodes: 10, rounds: 1, schedule: ThetaSchedule::Fixed, with_bn: false }
    }
}

/// Defense grid; every combination is one sweep point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub sparsity: Vec<f64>,
    pub noise: Vec<f64>,
    pub batch_size: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { sparsity: vec![0.0], noise: vec![0.0], batch_size: vec![4] }
    }
}

impl SweepSection {
    pub fn points(&self) -> Vec<DefenseConfig> {
        let mut out = Vec::new();
        for &sparsity in &self.sparsity {
            for &noise in &self.noise {
                for &batch_size in &self.batch_size {
                    out.push(DefenseConfig { sparsity, noise, batch_size });
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultigradSection {
    /// Numbers of independently initialized models whose gradients of the
    /// same image are combined.
    pub counts: Vec<usize>,
}

impl Default for MultigradSection {
    fn default() -> Self {
        Self { counts: vec![1, 4, 16] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RgapSection {
    /// Dense layer widths from input to logits.
    pub widths: Vec<usize>,
    pub activation: Activation,
    /// Gaussian noise added to the reported gradient.
    pub noise: f64,
    /// Layers (1-based) whose weight gradient is withheld.
    pub frozen: Vec<usize>,
    /// Layers solved through the generator.
    pub replace: Vec<usize>,
    pub latent: LatentFit,
}

impl Default for RgapSection {
    fn default() -> Self {
        Self {
            widths: vec![256, 128, 96, 64, 48, 32, 10],
            activation: Activation::Sigmoid,
            noise: 0.0,
            frozen: Vec::new(),
            replace: Vec::new(),
            latent: LatentFit::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GimlSection {
    /// Held-out tasks used to score the generator before and after training.
    pub eval_tasks: usize,
    pub eval_dataset_seed: u64,
    /// Reference generator scored on the same held-out tasks, e.g. one
    /// fitted to a different image distribution.
    pub baseline: Option<GeneratorSource>,
}

impl Default for GimlSection {
    fn default() -> Self {
        Self { eval_tasks: 10, eval_dataset_seed: 99, baseline: None }
    }
}

/// A complete experiment description, read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Command,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub dataset: DatasetRecipe,
    pub model: ModelSection,
    pub simulation: SimulationSection,
    pub defense: DefenseConfig,
    pub generator: GeneratorSource,
    pub inversion: InversionConfig,
    pub meta: MetaConfig,
    pub sweep: SweepSection,
    pub multigrad: MultigradSection,
    pub rgap: RgapSection,
    pub giml: GimlSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            command: Command::Invert,
            seeds: vec![0],
            out: None,
            dataset: DatasetRecipe::default(),
            model: ModelSection::default(),
            simulation: SimulationSection::default(),
            defense: DefenseConfig::default(),
            generator: GeneratorSource::default(),
            inversion: InversionConfig::default(),
            meta: MetaConfig::default(),
            sweep: SweepSection::default(),
            multigrad: MultigradSection::default(),
            rgap: RgapSection::default(),
            giml: GimlSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// The configuration with every default written out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Every violated constraint, each naming its field.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.seeds.is_empty() {
            errs.push("seeds must not be empty".into());
        }
        if self.dataset.count == 0 {
            errs.push("dataset.count must be >= 1".into());
        }
        if !(self.dataset.noise >= 0.0) {
            errs.push("dataset.noise must be >= 0".into());
        }
        if !["mlp3", "cnn4"].contains(&self.model.preset.as_str()) {
            errs.push(format!("model.preset must be mlp3 or cnn4, got `{}`", self.model.preset));
        }
        if self.simulation.nodes == 0 {
            errs.push("simulation.nodes must be >= 1".into());
        }
        if self.simulation.rounds == 0 {
            errs.push("simulation.rounds must be >= 1".into());
        }
        errs.extend(self.defense.validate());
        errs.extend(self.inversion.validate("inversion."));
        if self.command == Command::Giml {
            errs.extend(self.meta.validate("meta."));
            if self.meta.batch_size != self.defense.batch_size {
                errs.push(format!(
                    "meta.batch_size {} must equal defense.batch_size {}",
                    self.meta.batch_size, self.defense.batch_size
                ));
            }
        }
        let baseline = self.giml.baseline.as_ref().filter(|_| self.command == Command::Giml);
        for (name, source) in [("generator", Some(&self.generator)), ("giml.baseline", baseline)] {
            if let Some(path) = source.and_then(GeneratorSource::file) {
                if !path.exists() {
                    errs.push(format!("{name}: file {} does not exist", path.display()));
                }
            }
        }
        if self.command == Command::Sweep {
            let s = &self.sweep;
            if s.sparsity.is_empty() || s.noise.is_empty() || s.batch_size.is_empty() {
                errs.push("sweep: every grid axis needs at least one value".into());
            }
            for d in s.points() {
                errs.extend(d.validate().into_iter().map(|e| format!("sweep: {e}")));
            }
        }
        if self.command == Command::Multigrad
            && (self.multigrad.counts.is_empty() || self.multigrad.counts.contains(&0))
        {
            errs.push("multigrad.counts must be nonempty and positive".into());
        }
        if self.command == Command::Rgap {
            let r = &self.rgap;
            let depth = r.widths.len().saturating_sub(1);
            if depth == 0 || r.widths.contains(&0) {
                errs.push("rgap.widths needs at least two positive widths".into());
            }
            if !(r.noise >= 0.0) {
                errs.push("rgap.noise must be >= 0".into());
            }
            for &l in r.frozen.iter().chain(&r.replace) {
                if l == 0 || l > depth {
                    errs.push(format!("rgap: layer {l} out of range 1..={depth}"));
                }
            }
            if r.frozen.contains(&depth) {
                errs.push("rgap.frozen cannot include the output layer".into());
            }
        }
        errs.sort();
        errs.dedup();
        errs
    }

    /// Hash of everything that determines the attacked data: dataset,
    /// model, simulation, defense and seeds. Runs are comparable only when
    /// these agree.
    pub fn data_fingerprint(&self) -> String {
        let key = serde_json::json!({
            "dataset": self.dataset,
            "model": self.model,
            "simulation": self.simulation,
            "defense": self.defense,
            "seeds": self.seeds,
        });
        short_hash(key.to_string().as_bytes())
    }

    /// Hash of the resolved configuration and the library version.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_toml().as_bytes());
        h.update(env!("CARGO_PKG_VERSION").as_bytes());
        hex::encode(&h.finalize()[..8])
    }
}

fn short_hash(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}
