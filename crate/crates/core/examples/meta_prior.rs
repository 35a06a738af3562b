//! Learns a generator from intercepted gradients alone: federated rounds
//! produce single-image gradient reports, and meta-learning adapts an
//! untrained decoder so that latent search explains them. The decoder never
//! sees an image. Progress is tracked by how close fixed probe samples come
//! to the two cluster prototypes the victims' data is built around.

use gialab::flsim::{make_dataset, prototype_distance, simulate_rounds, SimConfig, ThetaSchedule};
use gialab::meta::{giml, MetaConfig};
use gialab::models::{ClassifierModel, DefenseConfig, GeneratorModel};

fn main() -> gialab::Result<()> {
    let data = make_dataset("two-cluster", 160, 11)?;
    let sim = SimConfig {
        nodes: 8,
        rounds: 5,
        defense: DefenseConfig { batch_size: 1, ..DefenseConfig::default() },
        schedule: ThetaSchedule::Reinitialized,
        with_bn: false,
        seed: 0,
    };
    let tasks = simulate_rounds(&data, &ClassifierModel::cnn4(0), &sim)?;
    println!("{} intercepted gradients", tasks.len());

    let cfg = MetaConfig {
        batch_size: 1,
        outer_steps: 30,
        latent_iterations: 100,
        alpha: 0.1,
        lambda_tv: 0.0,
        probe_every: 10,
        ..MetaConfig::default()
    };
    let (_, log) = giml(&tasks, &cfg, &GeneratorModel::dec16(5))?;
    for row in log.rows.iter().step_by(5) {
        println!("step {:>3}: summed cost {:+.4}  mean |z| {:.3}", row.outer_step, row.summed_cost, row.mean_z_norm);
    }
    for (step, samples) in &log.probes {
        println!("probes after step {step:>3}: distance to prototypes {:.4}", prototype_distance(samples)?);
    }
    println!("truth reads during training: {}", tasks.truth_reads());
    Ok(())
}
