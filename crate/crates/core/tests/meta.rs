use gialab::flsim::{make_dataset, simulate_rounds, SimConfig, TaskSet, ThetaSchedule};
use gialab::inversion::{CostTerms, DiscrepancyKind, InversionTask};
use gialab::meta::{giml, meta_param_step, regularized_latent_search, reptile_update, MetaConfig};
use gialab::models::{ClassifierModel, DefenseConfig, GeneratorModel};
use gialab::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn task_set(b: usize, seed: u64) -> TaskSet {
    let data = make_dataset("two-cluster", 32, seed).unwrap();
    let cfg = SimConfig {
        nodes: 4,
        rounds: 1,
        defense: DefenseConfig { batch_size: b, ..DefenseConfig::default() },
        schedule: ThetaSchedule::Fixed,
        with_bn: false,
        seed,
    };
    simulate_rounds(&data, &ClassifierModel::mlp3(seed), &cfg).unwrap()
}

fn codes(rng: &mut ChaCha8Rng, b: usize, k: usize) -> Tensor {
    Tensor::new(vec![b, k], (0..b * k).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn row_norms(z: &Tensor) -> Vec<f64> {
    z.data().chunks(z.shape()[1]).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

fn quick() -> MetaConfig {
    MetaConfig {
        task_batch: 2,
        batch_size: 1,
        local_steps: 2,
        outer_steps: 2,
        latent_iterations: 20,
        probes: 4,
        probe_every: 1,
        ..MetaConfig::default()
    }
}

fn terms() -> CostTerms {
    CostTerms::plain(DiscrepancyKind::NegCosine)
}

#[test]
fn heavy_latent_penalty_collapses_codes() {
    let set = task_set(1, 0);
    let task = set.inversion_task(0).unwrap();
    let gen = GeneratorModel::dec16(0);
    let (z, _) = regularized_latent_search(&task, &gen, 1e6, 200, 3e-2, &terms(), 0).unwrap();
    for n in row_norms(&z) {
        assert!(n <= 1e-2, "{n}");
    }
}

#[test]
fn latent_norm_shrinks_as_penalty_grows() {
    let set = task_set(1, 1);
    let task = set.inversion_task(0).unwrap();
    let gen = GeneratorModel::dec16(1);
    let norms: Vec<f64> = [0.0, 1e-3, 1e-2, 1e-1, 1.0]
        .iter()
        .map(|&l| row_norms(&regularized_latent_search(&task, &gen, l, 200, 3e-2, &terms(), 5).unwrap().0)[0])
        .collect();
    // Once the penalty wins, Adam leaves the codes jittering around zero at
    // the scale of its final step, so allow that much slack.
    for w in norms.windows(2) {
        assert!(w[1] <= w[0] + 1e-3, "{norms:?}");
    }
    assert!(matches!(
        regularized_latent_search(&task, &gen, -1.0, 10, 3e-2, &terms(), 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn zero_step_size_keeps_weights_bitwise() {
    let set = task_set(1, 2);
    let task = set.inversion_task(0).unwrap();
    let gen = GeneratorModel::dec16(2);
    let z = codes(&mut ChaCha8Rng::seed_from_u64(0), 1, gen.latent_dim());
    let (out, traj) = meta_param_step(&gen, &[(&task, &z)], 0.0, 3, &terms()).unwrap();
    assert_eq!(out.params(), gen.params());
    assert!(traj.windows(2).all(|w| w[0] == w[1]));

    let cfg = MetaConfig { alpha: 0.0, beta: 0.5, ..quick() };
    let (trained, _) = giml(&set, &cfg, &gen).unwrap();
    assert_eq!(trained.params(), gen.params());
}

#[test]
fn invalid_meta_settings_are_rejected() {
    let set = task_set(1, 0);
    let gen = GeneratorModel::dec16(0);
    for cfg in [
        MetaConfig { local_steps: 0, ..quick() },
        MetaConfig { beta: 0.0, ..quick() },
        MetaConfig { beta: 1.5, ..quick() },
        MetaConfig { alpha: -1e-3, ..quick() },
    ] {
        assert!(matches!(giml(&set, &cfg, &gen), Err(Error::Config(_))), "{cfg:?}");
    }
    // Tasks whose batch differs from the configured one are unusable.
    assert!(giml(&set, &MetaConfig { batch_size: 4, ..quick() }, &gen).is_err());
}

#[test]
fn a_small_step_lowers_the_summed_cost() {
    let mut down = 0;
    for trial in 0..10 {
        let set = task_set(1, trial);
        let gen = GeneratorModel::dec16(trial);
        let tasks: Vec<InversionTask> = (0..2).map(|i| set.inversion_task(i).unwrap()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let zs: Vec<Tensor> = tasks.iter().map(|_| codes(&mut rng, 1, gen.latent_dim())).collect();
        let pairs: Vec<(&InversionTask, &Tensor)> = tasks.iter().zip(&zs).collect();
        let (_, traj) = meta_param_step(&gen, &pairs, 1e-3, 1, &terms()).unwrap();
        down += usize::from(traj[1] < traj[0]);
    }
    assert!(down >= 9, "{down}/10");
}

#[test]
fn codes_fitted_to_a_generator_stay_consistent_under_adaptation() {
    // The codes are fitted first, so the weights start near a joint optimum
    // and ten small steps must not make things worse.
    let set = task_set(1, 3);
    let task = set.inversion_task(1).unwrap();
    let gen = GeneratorModel::dec16(3);
    let (z, _) = regularized_latent_search(&task, &gen, 0.0, 100, 3e-2, &terms(), 0).unwrap();
    let (_, traj) = meta_param_step(&gen, &[(&task, &z)], 1e-3, 10, &terms()).unwrap();
    assert_eq!(traj.len(), 11);
    assert!(traj[10] <= traj[0], "{traj:?}");
}

#[test]
fn training_logs_probes_and_never_reads_truth() {
    let set = task_set(1, 4);
    let before = set.truth_reads();
    let gen = GeneratorModel::dec16(4);
    let cfg = MetaConfig { alpha: 1e-2, ..quick() };
    let (trained, log) = giml(&set, &cfg, &gen).unwrap();
    assert_eq!(set.truth_reads(), before);

    assert_eq!(log.rows.len(), 2);
    assert!(log.rows.iter().all(|r| r.error.is_none() && r.summed_cost.is_finite() && r.mean_z_norm > 0.0));
    let steps: Vec<usize> = log.probes.iter().map(|(s, _)| *s).collect();
    assert_eq!(steps, vec![0, 1, 2]);
    assert_ne!(log.probes[0].1, log.probes[2].1);
    assert_eq!(log.probes[2].1, trained.generate(log.probe_codes.as_ref().unwrap()).unwrap());

    // Same seed, same generator.
    let (again, _) = giml(&set, &cfg, &gen).unwrap();
    assert_eq!(again.params(), trained.params());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reptile_interpolates(
        pairs in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..20),
        beta in 0.0f64..=1.0,
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let w = vec![Tensor::vector(a.clone()).unwrap()];
        let v = vec![Tensor::vector(b.clone()).unwrap()];
        let out = reptile_update(&w, &v, beta).unwrap();
        for ((o, x), y) in out[0].data().iter().zip(&a).zip(&b) {
            let (lo, hi) = (x.min(*y), x.max(*y));
            prop_assert!(*o >= lo - 1e-9 && *o <= hi + 1e-9);
        }
        prop_assert_eq!(reptile_update(&w, &v, 1.0).unwrap(), v.clone());
        prop_assert_eq!(reptile_update(&w, &w, beta).unwrap()[0].data().len(), a.len());
    }

    #[test]
    fn reptile_rejects_mismatched_lists(n in 0usize..4, m in 0usize..4) {
        prop_assume!(n != m);
        let w = vec![Tensor::zeros(&[2]); n];
        let v = vec![Tensor::zeros(&[2]); m];
        prop_assert!(reptile_update(&w, &v, 0.5).is_err());
    }
}
