use gialab::autodiff::{finite_diff, max_rel_error};
use gialab::flsim::make_dataset;
use gialab::models::{
    batch_gradient, bn_statistics, cross_entropy, recover_labels, Activation, ClassifierModel, GenBlock,
    GeneratorModel, GradientProgram, LayerSpec,
};
use gialab::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[test]
fn identity_layer_passes_input_through() {
    let spec = vec![LayerSpec::dense(2, 2, Activation::None)];
    let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let m = ClassifierModel::from_params(spec, vec![w, Tensor::zeros(&[2])]).unwrap();
    let logits = m.classify(&Tensor::vector(vec![1.0, 0.0]).unwrap()).unwrap();
    assert_eq!(logits.data(), &[1.0, 0.0]);
}

#[test]
fn zero_weights_give_the_final_bias() {
    let specs = vec![LayerSpec::dense(3, 4, Activation::Sigmoid), LayerSpec::dense(4, 2, Activation::None)];
    let bias = Tensor::vector(vec![0.25, -1.5]).unwrap();
    let params = vec![Tensor::zeros(&[4, 3]), Tensor::zeros(&[4]), Tensor::zeros(&[2, 4]), bias.clone()];
    let m = ClassifierModel::from_params(specs, params).unwrap();
    let logits = m.classify(&Tensor::vector(vec![0.3, 0.1, 0.9]).unwrap()).unwrap();
    assert_eq!(logits.data(), bias.data());
}

#[test]
fn forward_pass_matches_a_loop_reimplementation() {
    let m = ClassifierModel::dense_stack(&[6, 5, 4, 3], Activation::Sigmoid, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[6], 0.0, 1.0);
    let mut h = x.data().to_vec();
    let n = m.layers().len();
    for (i, layer) in m.layers().iter().enumerate() {
        let w = &layer.weight;
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        let b = layer.bias.as_ref().unwrap().data();
        h = (0..rows)
            .map(|r| {
                let mut acc = 0.0;
                for c in 0..cols {
                    acc += w.data()[r * cols + c] * h[c];
                }
                let v = acc + b[r];
                if i + 1 < n {
                    sigmoid(v)
                } else {
                    v
                }
            })
            .collect();
    }
    let logits = m.classify(&x).unwrap();
    for (a, b) in logits.data().iter().zip(&h) {
        assert!((a - b).abs() <= 1e-14 * b.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn cross_entropy_examples() {
    let uniform = Tensor::vector(vec![0.7; 4]).unwrap();
    assert!((cross_entropy(&uniform, 2).unwrap() - 4f64.ln()).abs() < 1e-12);
    let mut sat = vec![0.0; 5];
    sat[1] = 1e3;
    assert!(cross_entropy(&Tensor::vector(sat).unwrap(), 1).unwrap() < 1e-12);
    let l = [0.3, -0.2, 1.1];
    let manual = -(l[2] as f64).exp().ln() + l.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
    let got = cross_entropy(&Tensor::vector(l.to_vec()).unwrap(), 2).unwrap();
    assert!((got - manual).abs() < 1e-12);
    assert!(matches!(
        cross_entropy(&Tensor::vector(l.to_vec()).unwrap(), 3),
        Err(Error::LabelOutOfRange { .. })
    ));
}

#[test]
fn duplicated_example_reports_the_single_gradient() {
    let m = ClassifierModel::mlp3(2);
    let data = make_dataset("two-cluster", 4, 1).unwrap();
    let x = data.images[0].clone();
    let one = batch_gradient(&m, &[x.clone()], &[3], false).unwrap();
    let two = batch_gradient(&m, &[x.clone(), x], &[3, 3], false).unwrap();
    for (a, b) in one.gradients.iter().zip(&two.gradients) {
        assert!(max_rel_error(a, b, 1e-14) < 1e-12);
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let m = ClassifierModel::dense_stack(&[5, 4, 3], Activation::Sigmoid, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[1, 5], 0.0, 1.0);
    let prog = GradientProgram::new(&m, 1).unwrap();
    let params = m.param_tensors();
    let grads = prog.gradients(&params, &x, &[2]).unwrap();
    for (i, g) in grads.iter().enumerate() {
        let numeric = finite_diff(
            |p| {
                let mut ps = params.clone();
                ps[i] = p.clone();
                Ok(prog.loss(&ps, &x, &[2]).unwrap())
            },
            &params[i],
            1e-5,
        )
        .unwrap();
        let scale = g.max_abs().max(1e-8);
        assert!(max_rel_error(g, &numeric, 1e-3 * scale) < 1e-4, "parameter {i}");
    }
}

#[test]
fn zero_generator_outputs_one_half() {
    let g = GeneratorModel::dec16(0);
    let zeros: Vec<Tensor> = g.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    let g = g.with_params(zeros).unwrap();
    let out = g.generate(&Tensor::vector(vec![0.4; 16]).unwrap()).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.5));
}

#[test]
fn generator_latent_gradient_matches_finite_differences() {
    use gialab::autodiff::{Bindings, Graph};
    let gen = GeneratorModel::dec16(4);
    let mut g = Graph::new();
    let z = g.leaf("z", &[1, 16]);
    let w: Vec<_> = gen.params().iter().enumerate().map(|(i, p)| g.leaf(format!("w{i}"), p.shape())).collect();
    let out = gen.build_forward(&mut g, z, &w).unwrap();
    let sq = g.square(out).unwrap();
    let root = g.sum(sq).unwrap();
    let dz = g.derive(root, &[z]).unwrap()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let at = rand_tensor(&mut rng, &[1, 16], -1.0, 1.0);
    let mut base = Bindings::new();
    base.bind_all(&w, gen.params());
    let analytic = g.eval(dz, &base.clone().with(z, &at)).unwrap();
    let numeric = finite_diff(|t| Ok(g.eval(root, &base.clone().with(z, t))?.item()), &at, 1e-5).unwrap();
    assert!(max_rel_error(&analytic, &numeric, 1e-3 * analytic.max_abs()) < 1e-4);
}

#[test]
fn distinct_latents_decode_differently() {
    let g = GeneratorModel::dec16(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = g.generate(&rand_tensor(&mut rng, &[16], -1.0, 1.0)).unwrap();
    let b = g.generate(&rand_tensor(&mut rng, &[16], -1.0, 1.0)).unwrap();
    assert_ne!(a.data(), b.data());
}

#[test]
fn constant_feature_maps_have_zero_variance() {
    // A zero-weight conv layer gives a constant map per channel.
    let mut m = ClassifierModel::cnn4(0);
    let mut params = m.param_tensors();
    params[0] = Tensor::zeros(params[0].shape());
    m = m.with_params(params).unwrap();
    let data = make_dataset("two-cluster", 3, 0).unwrap();
    let stats = bn_statistics(&m, &data.images).unwrap();
    assert!(stats.variances[0].data().iter().all(|&v| v == 0.0));
}

#[test]
fn bn_stats_match_a_two_pass_loop() {
    let specs = vec![
        LayerSpec::Conv {
            in_channels: 1,
            out_channels: 3,
            in_height: 6,
            in_width: 6,
            kernel: 3,
            stride: 1,
            pad: 1,
            bias: true,
            activation: Activation::Elu,
        },
        LayerSpec::Conv {
            in_channels: 3,
            out_channels: 2,
            in_height: 6,
            in_width: 6,
            kernel: 3,
            stride: 2,
            pad: 1,
            bias: true,
            activation: Activation::Elu,
        },
        LayerSpec::dense(18, 4, Activation::None),
    ];
    let m = ClassifierModel::init(specs, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let images: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, &[36], 0.0, 1.0)).collect();
    let stats = bn_statistics(&m, &images).unwrap();

    // Direct convolution loops for the oracle.
    let conv = |x: &[f64], ci: usize, h: usize, w: &Tensor, b: &Tensor, stride: usize| -> (Vec<f64>, usize) {
        let co = w.shape()[0];
        let oh = (h + 2 - 3) / stride + 1;
        let mut out = vec![0.0; co * oh * oh];
        for o in 0..co {
            for i in 0..oh {
                for j in 0..oh {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for di in 0..3 {
                            for dj in 0..3 {
                                let (y, x_) = ((i * stride + di) as isize - 1, (j * stride + dj) as isize - 1);
                                if y < 0 || x_ < 0 || y >= h as isize || x_ >= h as isize {
                                    continue;
                                }
                                acc += w.data()[((o * ci + c) * 3 + di) * 3 + dj]
                                    * x[(c * h + y as usize) * h + x_ as usize];
                            }
                        }
                    }
                    out[(o * oh + i) * oh + j] = if acc > 0.0 { acc } else { acc.exp_m1() };
                }
            }
        }
        (out, oh)
    };
    let l = m.layers();
    let mut maps = [Vec::new(), Vec::new()];
    for im in &images {
        let (a, h1) = conv(im.data(), 1, 6, &l[0].weight, l[0].bias.as_ref().unwrap(), 1);
        let (b, _) = conv(&a, 3, h1, &l[1].weight, l[1].bias.as_ref().unwrap(), 2);
        maps[0].push(a);
        maps[1].push(b);
    }
    for (layer, (ch, s)) in [(3usize, 36usize), (2, 9)].into_iter().enumerate() {
        for c in 0..ch {
            let vals: Vec<f64> = maps[layer].iter().flat_map(|m| m[c * s..(c + 1) * s].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!((stats.means[layer].data()[c] - mean).abs() < 1e-10);
            assert!((stats.variances[layer].data()[c] - var).abs() < 1e-10);
        }
    }
}

#[test]
fn label_matches_brute_force_search() {
    let data = make_dataset("blobs", 10, 4).unwrap();
    for seed in 0..5u64 {
        let m = ClassifierModel::mlp3(seed);
        let x = data.images[seed as usize].clone();
        let report = batch_gradient(&m, &[x.clone()], &[3], false).unwrap();
        assert_eq!(recover_labels(&report, &m).unwrap(), vec![3]);
        // Only the true label reproduces the reported gradient.
        let matches: Vec<usize> = (0..10)
            .filter(|&y| batch_gradient(&m, &[x.clone()], &[y], false).unwrap().gradients == report.gradients)
            .collect();
        assert_eq!(matches, vec![3]);
    }
}

#[test]
fn saturated_logits_fail_label_recovery() {
    let specs = vec![LayerSpec::dense(2, 3, Activation::None)];
    let mut bias = vec![0.0; 3];
    bias[1] = 1e3;
    let m = ClassifierModel::from_params(specs, vec![Tensor::zeros(&[3, 2]), Tensor::vector(bias).unwrap()]).unwrap();
    let report = batch_gradient(&m, &[Tensor::vector(vec![0.5, 0.5]).unwrap()], &[1], false).unwrap();
    assert!(matches!(recover_labels(&report, &m), Err(Error::LabelRecovery { .. })));
}

#[test]
fn label_recovery_needs_single_examples() {
    let m = ClassifierModel::mlp3(0);
    let data = make_dataset("two-cluster", 2, 0).unwrap();
    let report = batch_gradient(&m, &data.images, &data.labels, false).unwrap();
    assert!(matches!(recover_labels(&report, &m), Err(Error::Unsupported(_))));
}

#[test]
fn malformed_architectures_are_rejected() {
    let hidden_logits = vec![LayerSpec::dense(4, 3, Activation::Sigmoid)];
    assert!(ClassifierModel::init(hidden_logits, 0).is_err());
    let mismatch = vec![LayerSpec::dense(4, 3, Activation::Sigmoid), LayerSpec::dense(5, 2, Activation::None)];
    assert!(ClassifierModel::init(mismatch, 0).is_err());
    let bad_gen = vec![GenBlock::Dense { inputs: 3, outputs: 2, activation: Activation::None }];
    assert!(GeneratorModel::init(3, bad_gen, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn batch_gradient_is_the_mean_of_single_reports(seed in 0u64..1000, b in 2usize..4) {
        let m = ClassifierModel::dense_stack(&[8, 6, 4], Activation::Sigmoid, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<Tensor> = (0..b).map(|_| rand_tensor(&mut rng, &[8], 0.0, 1.0)).collect();
        let ys: Vec<usize> = (0..b).map(|_| rng.random_range(0..4)).collect();
        let batch = batch_gradient(&m, &xs, &ys, false).unwrap();
        let singles: Vec<_> = xs.iter().zip(&ys).map(|(x, &y)| batch_gradient(&m, &[x.clone()], &[y], false).unwrap()).collect();
        for (p, g) in batch.gradients.iter().enumerate() {
            for (i, v) in g.data().iter().enumerate() {
                let mean = singles.iter().map(|s| s.gradients[p].data()[i]).sum::<f64>() / b as f64;
                prop_assert!((v - mean).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn bias_gradient_is_negative_only_at_the_label(seed in 0u64..1000, y in 0usize..10) {
        let m = ClassifierModel::mlp3(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let x = rand_tensor(&mut rng, &[256], 0.0, 1.0);
        let r = batch_gradient(&m, &[x], &[y], false).unwrap();
        let gb = r.gradients[m.final_bias_index()].data();
        for (i, &v) in gb.iter().enumerate() {
            prop_assert_eq!(v < 0.0, i == y);
        }
    }

    #[test]
    fn duplicated_batch_has_identical_bn_stats(seed in 0u64..1000) {
        let m = ClassifierModel::cnn4(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[256], 0.0, 1.0);
        let one = bn_statistics(&m, std::slice::from_ref(&x)).unwrap();
        let three = bn_statistics(&m, &[x.clone(), x.clone(), x]).unwrap();
        for (a, b) in one.means.iter().chain(&one.variances).zip(three.means.iter().chain(&three.variances)) {
            for (u, v) in a.data().iter().zip(b.data()) {
                prop_assert!((u - v).abs() <= 1e-12);
            }
        }
        prop_assert!(one.variances.iter().all(|v| v.data().iter().all(|&s| s >= 0.0)));
    }
}

proptest! {
    // 250 parameter draws with four codes each.
    #![proptest_config(ProptestConfig::with_cases(250))]

    #[test]
    fn generator_outputs_stay_in_the_unit_interval(seed in 0u64..10_000, scale in 0.1f64..20.0) {
        let base = GeneratorModel::dec16(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<Tensor> = base.params().iter().map(|p| rand_tensor(&mut rng, p.shape(), -scale, scale)).collect();
        let g = base.with_params(params).unwrap();
        let z = rand_tensor(&mut rng, &[4, 16], -scale, scale);
        let out = g.generate(&z).unwrap();
        prop_assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
