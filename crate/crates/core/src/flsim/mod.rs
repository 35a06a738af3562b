//! Synthetic data, simulated federated rounds, and gradient defenses.

mod dataset;
mod defense;
mod simulate;
mod taskset;

pub use dataset::{make_dataset, prototype_distance, prototypes, DatasetRecipe, Family, SyntheticDataset, CLASSES};
pub use defense::{apply_defense, defend_noise, defend_sparsify, kept_count};
pub use simulate::{derive_seed, descend, shards, simulate_rounds, SimConfig, ThetaSchedule};
pub use taskset::{TaskRecord, TaskSet};
