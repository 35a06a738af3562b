use std::collections::BTreeMap;

use autodiff::Tensor;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::SyntheticDataset;
use super::defense::apply_defense;
use super::taskset::{TaskRecord, TaskSet};
use crate::error::{Error, Result};
use crate::models::{ClassifierModel, DefenseConfig, GradientProgram};
use crate::sealed::Sealed;

/// How the global model evolves between rounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ThetaSchedule {
    Fixed,
    /// Fresh seeded initialization every round.
    Reinitialized,
    /// One descent step on the averaged reported gradients per round.
    Trained { lr: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub nodes: usize,
    pub rounds: usize,
    pub defense: DefenseConfig,
    pub schedule: ThetaSchedule,
    /// Attach exact BN statistics to every report.
    pub with_bn: bool,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            nodes: 4,
            rounds: 1,
            defense: DefenseConfig::default(),
            schedule: ThetaSchedule::Fixed,
            with_bn: false,
            seed: 0,
        }
    }
}

/// Mixes a base seed with identifiers (SplitMix64 finalizer per step).
pub fn derive_seed(seed: u64, ids: &[u64]) -> u64 {
    let mut h = seed;
    for &id in ids {
        h ^= id.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Contiguous equal shards; the remainder is unused.
pub fn shards(len: usize, nodes: usize) -> Vec<std::ops::Range<usize>> {
    let size = len / nodes.max(1);
    (0..nodes).map(|n| n * size..(n + 1) * size).collect()
}

/// Simulates `rounds` of `nodes` reporting defended batch gradients.
///
/// Ground-truth batches are kept in sealed, evaluation-only fields.
pub fn simulate_rounds(data: &SyntheticDataset, model: &ClassifierModel, cfg: &SimConfig) -> Result<TaskSet> {
    let b = cfg.defense.batch_size;
    let errs = cfg.defense.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs.join("; ")));
    }
    if cfg.nodes == 0 || cfg.rounds == 0 {
        return Err(Error::Config("nodes and rounds must be >= 1".into()));
    }
    if model.input_dim() != data.shape.len() {
        return Err(Error::Shape(format!(
            "model expects {} inputs, dataset images have {}",
            model.input_dim(),
            data.shape.len()
        )));
    }
    let shard_ranges = shards(data.len(), cfg.nodes);
    if let Some(r) = shard_ranges.iter().find(|r| r.len() < b) {
        return Err(Error::ShardTooSmall { shard: r.len(), batch: b });
    }
    let program = GradientProgram::new(model, b)?;
    let mut snapshots = BTreeMap::new();
    let mut tasks = Vec::new();
    let mut current = model.clone();
    for round in 0..cfg.rounds {
        if round > 0 {
            current = match cfg.schedule {
                ThetaSchedule::Fixed => current,
                ThetaSchedule::Reinitialized => {
                    ClassifierModel::init(model.specs(), derive_seed(cfg.seed, &[round as u64, u64::MAX]))?
                }
                ThetaSchedule::Trained { lr } => {
                    let prev: Vec<&TaskRecord> = tasks.iter().filter(|t: &&TaskRecord| t.round == round - 1).collect();
                    descend(&current, &prev, lr)?
                }
            };
        }
        let id = current.fingerprint();
        let params = current.param_tensors();
        snapshots.entry(id.clone()).or_insert_with(|| current.clone());
        for (node, range) in shard_ranges.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[round as u64, node as u64]));
            let mut picks = sample(&mut rng, range.len(), b).into_vec();
            picks.sort_unstable();
            let idx: Vec<usize> = picks.into_iter().map(|i| range.start + i).collect();
            let images: Vec<Tensor> = idx.iter().map(|&i| data.images[i].clone()).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let xs = crate::models::stack(&images)?;
            let gradients = program.gradients(&params, &xs, &labels)?;
            let bn_stats = if cfg.with_bn { Some(program.bn_statistics(&params, &xs)?) } else { None };
            let raw = crate::models::GradientReport {
                model_id: id.clone(),
                gradients,
                batch_size: b,
                labels: Some(labels),
                bn_stats,
                round,
                node,
            };
            let noise_seed = derive_seed(cfg.seed, &[round as u64, node as u64, 1]);
            let report = apply_defense(&raw, &cfg.defense, noise_seed);
            tasks.push(TaskRecord {
                round,
                node,
                snapshot: id.clone(),
                report,
                truth: Some(Sealed::new(images)),
                indices: idx,
            });
        }
    }
    Ok(TaskSet { snapshots, tasks, defense: cfg.defense, schedule: cfg.schedule })
}

/// `θ − lr · mean_n g_n` over the reports of one round.
pub fn descend(model: &ClassifierModel, reports: &[&TaskRecord], lr: f64) -> Result<ClassifierModel> {
    if reports.is_empty() {
        return Ok(model.clone());
    }
    let scale = lr / reports.len() as f64;
    let mut params = model.param_tensors();
    for r in reports {
        for (p, g) in params.iter_mut().zip(&r.report.gradients) {
            for (x, v) in p.data_mut().iter_mut().zip(g.data()) {
                *x -= scale * v;
            }
        }
    }
    model.with_params(params)
}
