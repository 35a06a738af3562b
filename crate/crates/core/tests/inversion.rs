use gialab::flsim::make_dataset;
use gialab::inversion::{
    bn_regularizer, cost, discrepancy, invert, invert_multi, tv_regularizer, CostTerms, DiscrepancyKind,
    InversionConfig, InversionTask, Mode, Phase,
};
use gialab::metrics::psnr;
use gialab::models::{batch_gradient, bn_statistics, Activation, ClassifierModel, GeneratorModel};
use gialab::{Error, ImageShape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// A single-image task on `model` for image `j` of a two-cluster set.
fn task_for(model: &ClassifierModel, seed: u64, with_bn: bool) -> (InversionTask, Tensor) {
    let data = make_dataset("two-cluster", 32, seed).unwrap();
    let x = data.images[0].clone();
    let report = batch_gradient(model, &[x.clone()], &[data.labels[0]], with_bn).unwrap();
    let task = InversionTask::from_report(model.clone(), report).unwrap().with_truth(vec![x.clone()]);
    (task, x)
}

#[test]
fn discrepancy_examples() {
    let g = [0.3, -1.2, 2.0];
    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
    assert!((discrepancy(&g, &g, DiscrepancyKind::NegCosine).unwrap() + 1.0).abs() < 1e-15);
    assert!((discrepancy(&g, &neg, DiscrepancyKind::NegCosine).unwrap() - 1.0).abs() < 1e-15);
    assert_eq!(discrepancy(&g, &g, DiscrepancyKind::L2).unwrap(), 0.0);
    assert_eq!(discrepancy(&[1.0, 0.0], &[0.0, 1.0], DiscrepancyKind::NegCosine).unwrap(), 0.0);
    assert!((discrepancy(&[1.0, 0.0], &[0.0, 1.0], DiscrepancyKind::L2).unwrap() - 2f64.sqrt()).abs() < 1e-15);
    assert!(matches!(discrepancy(&[1.0], &[1.0, 2.0], DiscrepancyKind::L2), Err(Error::Discrepancy(_))));
}

#[test]
fn tv_examples() {
    let s = ImageShape::new(1, 2, 2);
    assert_eq!(tv_regularizer(&Tensor::vector(vec![0.4; 4]).unwrap(), s).unwrap(), 0.0);
    let steps = Tensor::vector(vec![0.0, 1.0, 0.0, 1.0]).unwrap();
    assert_eq!(tv_regularizer(&steps, s).unwrap(), 2.0);
}

#[test]
fn bn_regularizer_examples() {
    let m = ClassifierModel::cnn4(1);
    let data = make_dataset("two-cluster", 4, 2).unwrap();
    let stats = bn_statistics(&m, &data.images).unwrap();
    assert_eq!(bn_regularizer(&data.images, &m, &stats).unwrap(), 0.0);

    let mut shifted = stats.clone();
    shifted.means[1].data_mut()[3] += 0.25;
    let r = bn_regularizer(&data.images, &m, &shifted).unwrap();
    assert!((r - 0.25).abs() < 1e-12, "{r}");

    // Zero weights and zero input give zero statistics.
    let zero = m.with_params(m.param_tensors().iter().map(|p| Tensor::zeros(p.shape())).collect()).unwrap();
    let mut target = stats.clone();
    for t in target.means.iter_mut().chain(target.variances.iter_mut()) {
        *t = Tensor::zeros(t.shape());
    }
    let black = vec![Tensor::zeros(&[256]); 2];
    assert_eq!(bn_regularizer(&black, &zero, &target).unwrap(), 0.0);
}

#[test]
fn cost_at_the_truth_is_the_self_match_value() {
    for model in [ClassifierModel::mlp3(3), ClassifierModel::cnn4(3)] {
        let (task, x) = task_for(&model, 4, true);
        let truth = [x];
        for kind in [DiscrepancyKind::NegCosine, DiscrepancyKind::L2] {
            let c = cost(&truth, &task, &CostTerms::plain(kind)).unwrap();
            assert!((c - kind.self_match()).abs() <= 1e-12, "{c}");
        }
    }
}

#[test]
fn determined_single_layer_is_recovered_in_input_space() {
    let model = ClassifierModel::dense_stack(&[256, 10], Activation::None, 2).unwrap();
    let (task, x) = task_for(&model, 9, false);
    let cfg = InversionConfig {
        mode: Mode::X,
        discrepancy: DiscrepancyKind::L2,
        iterations: 2000,
        lambda_tv: 0.0,
        restarts: 1,
        ..Default::default()
    };
    let est = invert(&task, &cfg, None).unwrap();
    let worst = est.images[0].data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-3, "max error {worst}");
}

#[test]
fn latent_search_finds_a_contained_image() {
    let model = ClassifierModel::mlp3(5);
    let data = make_dataset("two-cluster", 8, 3).unwrap();
    let x = data.images[1].map(|v| v.clamp(0.02, 0.98));
    let gen = GeneratorModel::containing(&Tensor::vector(vec![0.5, -0.3, 0.2, 0.1]).unwrap(), &x, 0).unwrap();
    let report = batch_gradient(&model, &[x.clone()], &[data.labels[1]], false).unwrap();
    let task = InversionTask::from_report(model, report).unwrap();
    let cfg = InversionConfig { mode: Mode::Z, z_iterations: 600, lambda_tv: 0.0, ..Default::default() };
    let est = invert(&task, &cfg, Some(&gen)).unwrap();
    assert!(est.final_cost + 1.0 < 1e-6, "cost {}", est.final_cost);
    assert!(psnr(&est.images[0], &x).unwrap() > 40.0);
}

#[test]
fn chosen_restart_has_the_smallest_final_cost() {
    let (task, _) = task_for(&ClassifierModel::mlp3(0), 1, false);
    let cfg = InversionConfig { mode: Mode::X, iterations: 60, restarts: 4, ..Default::default() };
    let est = invert(&task, &cfg, None).unwrap();
    let costs: Vec<f64> = est.restarts.iter().filter_map(|r| r.final_cost).collect();
    assert_eq!(costs.len(), 4);
    assert_eq!(est.final_cost, costs.iter().cloned().fold(f64::INFINITY, f64::min));
    let seeds: Vec<u64> = est.restarts.iter().map(|r| r.seed).collect();
    assert_eq!(seeds, vec![0, 1, 2, 3]);
    assert_eq!(est.curve.last().unwrap().cost, est.final_cost);
    assert!(est.images.iter().all(|im| im.data().iter().all(|v| (0.0..=1.0).contains(v))));
}

#[test]
fn single_task_multi_inversion_matches_invert() {
    let (task, _) = task_for(&ClassifierModel::mlp3(4), 6, false);
    let cfg = InversionConfig { mode: Mode::X, iterations: 50, restarts: 2, ..Default::default() };
    let a = invert(&task, &cfg, None).unwrap();
    let b = invert_multi(&[task], &cfg, None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn duplicated_task_doubles_the_l2_cost_only() {
    let (task, _) = task_for(&ClassifierModel::mlp3(8), 2, false);
    let cfg = InversionConfig {
        mode: Mode::X,
        discrepancy: DiscrepancyKind::L2,
        iterations: 80,
        restarts: 1,
        lambda_tv: 0.0,
        ..Default::default()
    };
    let one = invert(&task, &cfg, None).unwrap();
    let two = invert_multi(&[task.clone(), task], &cfg, None).unwrap();
    // Adam is scale invariant up to its epsilon, so the paths agree closely
    // but not bitwise.
    let rel = (two.final_cost - 2.0 * one.final_cost).abs() / one.final_cost;
    assert!(rel < 1e-3, "{} vs 2 x {}", two.final_cost, one.final_cost);
    let worst = one.images[0].data().iter().zip(two.images[0].data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn more_gradients_do_not_hurt() {
    let data = make_dataset("two-cluster", 64, 12).unwrap();
    let specs = ClassifierModel::mlp3(0).specs();
    let cfg = InversionConfig { mode: Mode::X, iterations: 150, restarts: 1, lambda_tv: 0.0, ..Default::default() };
    let mut not_worse = 0;
    for seed in 0..10u64 {
        let x = data.images[seed as usize].clone();
        let y = data.labels[seed as usize];
        let tasks: Vec<InversionTask> = (0..8)
            .map(|t| {
                let m = ClassifierModel::init(specs.clone(), 100 * seed + t).unwrap();
                InversionTask::from_report(m.clone(), batch_gradient(&m, &[x.clone()], &[y], false).unwrap()).unwrap()
            })
            .collect();
        let c = InversionConfig { seed, ..cfg.clone() };
        let p1 = psnr(&invert(&tasks[0], &c, None).unwrap().images[0], &x).unwrap();
        let p8 = psnr(&invert_multi(&tasks, &c, None).unwrap().images[0], &x).unwrap();
        not_worse += usize::from(p8 >= p1);
    }
    assert!(not_worse >= 9, "{not_worse}/10");
}

#[test]
fn parameter_phase_starts_where_latent_phase_ends() {
    let (task, _) = task_for(&ClassifierModel::cnn4(2), 5, false);
    let gen = GeneratorModel::dec16(3);
    let cfg = InversionConfig { mode: Mode::ZW, z_iterations: 30, iterations: 20, restarts: 1, ..Default::default() };
    let est = invert(&task, &cfg, Some(&gen)).unwrap();
    let last_z = est.curve.iter().filter(|p| p.phase == Phase::Z).last().unwrap();
    let first_w = est.curve.iter().find(|p| p.phase == Phase::W).unwrap();
    assert_eq!(last_z.iteration, 30);
    assert_eq!(first_w.iteration, 0);
    assert!((first_w.cost - last_z.cost).abs() <= 1e-12);
    let ends = est.phase_ends();
    assert_eq!(ends.iter().map(|e| e.0).collect::<Vec<_>>(), vec![Phase::Z, Phase::W]);
    assert!(ends[1].1 <= ends[0].1 + 1e-12);
    assert_eq!(est.weights.as_ref().unwrap().len(), 1);
}

#[test]
fn generator_modes_need_a_generator() {
    let (task, _) = task_for(&ClassifierModel::mlp3(0), 0, false);
    for mode in [Mode::Z, Mode::W, Mode::ZX, Mode::ZW] {
        let cfg = InversionConfig { mode, ..Default::default() };
        assert!(matches!(invert(&task, &cfg, None), Err(Error::MissingGenerator(_))));
    }
}

#[test]
fn invalid_configurations_name_their_fields() {
    let cfg = InversionConfig { eta_z: -1.0, restarts: 0, ..Default::default() };
    let errs = cfg.validate("inversion.");
    assert!(errs.iter().any(|e| e.contains("inversion.eta_z")), "{errs:?}");
    assert!(errs.iter().any(|e| e.contains("inversion.restarts")), "{errs:?}");
}

#[test]
fn mismatched_generator_is_an_error() {
    let (task, _) = task_for(&ClassifierModel::mlp3(0), 0, false);
    let small = GeneratorModel::containing(&Tensor::vector(vec![0.1; 2]).unwrap(), &Tensor::vector(vec![0.5; 10]).unwrap(), 0)
        .unwrap();
    let cfg = InversionConfig { mode: Mode::Z, z_iterations: 5, restarts: 1, ..Default::default() };
    assert!(invert(&task, &cfg, Some(&small)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tv_is_quadratically_homogeneous(seed in 0u64..10_000, c in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = ImageShape::new(2, 5, 4);
        let x = rand_tensor(&mut rng, &[s.len()], 0.0, 1.0);
        let a = tv_regularizer(&x, s).unwrap();
        let b = tv_regularizer(&x.map(|v| c * v), s).unwrap();
        prop_assert!((b - c * c * a).abs() <= 1e-10 * (1.0 + b.abs()));
    }

    #[test]
    fn negative_cosine_ignores_common_scale(seed in 0u64..10_000, c in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sa: Vec<f64> = a.iter().map(|v| c * v).collect();
        let sb: Vec<f64> = b.iter().map(|v| c * v).collect();
        let d0 = discrepancy(&a, &b, DiscrepancyKind::NegCosine).unwrap();
        let d1 = discrepancy(&sa, &sb, DiscrepancyKind::NegCosine).unwrap();
        prop_assert!((d0 - d1).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn reported_estimates_are_clamped_and_consistent(seed in 0u64..1000) {
        let (task, _) = task_for(&ClassifierModel::mlp3(seed), seed, false);
        let cfg = InversionConfig { mode: Mode::X, iterations: 20, restarts: 2, eta_x: 0.5, seed, ..Default::default() };
        let est = invert(&task, &cfg, None).unwrap();
        prop_assert!(est.images.iter().all(|im| im.data().iter().all(|v| (0.0..=1.0).contains(v))));
        prop_assert!(!est.curve.is_empty());
        prop_assert_eq!(est.curve.last().unwrap().cost, est.final_cost);
        for r in &est.restarts {
            if let Some(c) = r.final_cost {
                prop_assert!(est.final_cost <= c);
            }
        }
    }
}
