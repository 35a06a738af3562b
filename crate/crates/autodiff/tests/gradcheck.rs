//! Derivatives from `derive` against central finite differences, first and
//! second order, for every op in the supported set.

use autodiff::{finite_diff, Bindings, Expr, Graph, GraphError, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Entrywise relative error, with entries far below the gradient's scale
/// compared against that scale instead of their own magnitude.
fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let scale = a.max_abs().max(b.max_abs()).max(1e-8);
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3 * scale))
        .fold(0.0, f64::max)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// A scalar test function of one leaf `x`: the graph, the leaf and the root.
struct Case {
    graph: Graph,
    x: Expr,
    root: Expr,
}

impl Case {
    fn value(&self, at: &Tensor) -> Result<f64> {
        Ok(self.graph.eval(self.root, &Bindings::new().with(self.x, at))?.item())
    }
}

/// Builds `sum(w * op(x, consts...))` so every output entry is exercised.
fn build(
    x_shape: &[usize],
    rng: &mut ChaCha8Rng,
    op: impl Fn(&mut Graph, Expr, &mut ChaCha8Rng) -> Result<Expr>,
) -> Case {
    let mut g = Graph::new();
    let x = g.leaf("x", x_shape);
    let y = op(&mut g, x, rng).unwrap();
    let shape = g.shape(y).to_vec();
    let w = g.constant(random(rng, &shape, -1.0, 1.0));
    let root = g.dot(w, y).unwrap();
    Case { graph: g, x, root }
}

type OpFn = fn(&mut Graph, Expr, &mut ChaCha8Rng) -> Result<Expr>;

fn op_cases() -> Vec<(&'static str, Vec<usize>, f64, f64, OpFn)> {
    vec![
        ("add", vec![3, 2], -1.0, 1.0, |g, x, r| {
            let c = g.constant(random(r, &[3, 2], -1.0, 1.0));
            let xx = g.mul(x, x)?;
            let s = g.add(xx, c)?;
            g.add(s, x)
        }),
        ("scalar_multiply", vec![4], -1.0, 1.0, |g, x, _| {
            let s = g.sum(x)?;
            g.mul_scalar(s, x)
        }),
        ("matmul", vec![3, 4], -1.0, 1.0, |g, x, r| {
            let w = g.constant(random(r, &[5, 4], -1.0, 1.0));
            let y = g.matmul_t(x, w, false, true)?;
            let y2 = g.matmul_t(y, x, true, false)?;
            g.matmul_t(x, y2, false, true)
        }),
        ("conv2d", vec![2, 2, 6, 6], -1.0, 1.0, |g, x, r| {
            let k = g.constant(random(r, &[3, 2, 3, 3], -1.0, 1.0));
            let y = g.conv2d(x, k, 2, 1)?;
            let y2 = g.mul(y, y)?;
            let k2 = g.constant(random(r, &[2, 3, 3, 3], -1.0, 1.0));
            g.conv2d(y2, k2, 1, 1)
        }),
        ("conv2d_kernel", vec![3, 2, 3, 3], -1.0, 1.0, |g, k, r| {
            let x = g.constant(random(r, &[2, 2, 5, 5], -1.0, 1.0));
            let y = g.conv2d(x, k, 1, 1)?;
            g.mul(y, y)
        }),
        ("upsample2x", vec![1, 2, 3, 3], -1.0, 1.0, |g, x, _| {
            let u = g.upsample2x(x)?;
            g.square(u)
        }),
        ("sigmoid", vec![5], -3.0, 3.0, |g, x, _| g.sigmoid(x)),
        ("elu", vec![6], -3.0, 3.0, |g, x, _| {
            let e = g.elu(x)?;
            g.mul(e, x)
        }),
        ("sum_mean_variance", vec![2, 3], -2.0, 2.0, |g, x, _| {
            let v = g.variance(x)?;
            let m = g.mean(x)?;
            let s = g.sum(x)?;
            let vm = g.mul(v, m)?;
            g.add(vm, s)
        }),
        ("channel_reduce", vec![2, 3, 4], -2.0, 2.0, |g, x, _| {
            let s = g.sum_keep(x, 2, 3, 4)?;
            let s2 = g.square(s)?;
            g.expand(s2, 2, 3, 4, &[2, 3, 4])
        }),
        ("l2_norm", vec![4], -2.0, 2.0, |g, x, _| g.norm(x)),
        ("inner_product", vec![4], -2.0, 2.0, |g, x, r| {
            let c = g.constant(random(r, &[4], -1.0, 1.0));
            let d = g.dot(x, c)?;
            let e = g.dot(x, x)?;
            g.mul(d, e)
        }),
        ("square", vec![3], -2.0, 2.0, |g, x, _| g.square(x)),
        ("div_positive_scalar", vec![3], 0.5, 2.0, |g, x, _| {
            let s = g.sum(x)?;
            g.div_scalar(x, s)
        }),
        ("softmax_cross_entropy", vec![2, 4], -3.0, 3.0, |g, x, _| {
            let lse = g.logsumexp_rows(x)?;
            let p = g.softmax_rows(x)?;
            let pp = g.sum(p)?;
            let l = g.sum(lse)?;
            g.mul(l, pp)
        }),
        ("exp_log", vec![3], 0.5, 2.0, |g, x, _| {
            let e = g.exp(x)?;
            let l = g.log(x)?;
            g.mul(e, l)
        }),
    ]
}

#[test]
fn first_order_matches_finite_differences_at_100_points() {
    for (name, shape, lo, hi, op) in op_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut case = build(&shape, &mut rng, op);
        let grad = case.graph.derive(case.root, &[case.x]).unwrap()[0];
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let at = random(&mut rng, &shape, lo, hi);
            let analytic = case.graph.eval(grad, &Bindings::new().with(case.x, &at)).unwrap();
            let numeric = finite_diff(|t| case.value(t), &at, 1e-5).unwrap();
            worst = worst.max(rel_err(&analytic, &numeric));
        }
        assert!(worst < 1e-4, "{name}: worst relative error {worst:e}");
    }
}

#[test]
fn second_order_matches_finite_differences_of_first_derivative() {
    for (name, shape, lo, hi, op) in op_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut case = build(&shape, &mut rng, op);
        let g = &mut case.graph;
        let d1 = g.derive(case.root, &[case.x]).unwrap()[0];
        let c = g.constant(random(&mut rng, &shape, -1.0, 1.0));
        // Directional derivative <c, grad f>, differentiated again.
        let dir = g.dot(c, d1).unwrap();
        let d2 = g.derive(dir, &[case.x]).unwrap()[0];
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let at = random(&mut rng, &shape, lo, hi);
            let analytic = g.eval(d2, &Bindings::new().with(case.x, &at)).unwrap();
            let numeric = finite_diff(
                |t| Ok(g.eval(dir, &Bindings::new().with(case.x, t))?.item()),
                &at,
                1e-5,
            )
            .unwrap();
            worst = worst.max(rel_err(&analytic, &numeric));
        }
        assert!(worst < 1e-3, "{name}: worst relative error {worst:e}");
    }
}

#[test]
fn power_rule_examples() {
    let mut g = Graph::new();
    let x = g.leaf("x", &[]);
    let sq = g.square(x).unwrap();
    let d = g.derive(sq, &[x]).unwrap()[0];
    let three = Tensor::scalar(3.0);
    assert_eq!(g.eval(d, &Bindings::new().with(x, &three)).unwrap().item(), 6.0);

    let cube = g.pow(x, 3.0).unwrap();
    let d1 = g.derive(cube, &[x]).unwrap()[0];
    let d2 = g.derive(d1, &[x]).unwrap()[0];
    let two = Tensor::scalar(2.0);
    assert_eq!(g.eval(d2, &Bindings::new().with(x, &two)).unwrap().item(), 12.0);
}

/// Two-layer sigmoid MLP with softmax cross-entropy; returns the leaves
/// (x, w1, w2, b2) and the squared norm of the parameter gradient.
fn gradient_norm_graph() -> (Graph, Expr, Vec<Expr>, Expr) {
    let mut g = Graph::new();
    let x = g.leaf("x", &[1, 5]);
    let w1 = g.leaf("w1", &[4, 5]);
    let w2 = g.leaf("w2", &[3, 4]);
    let b2 = g.leaf("b2", &[3]);
    let h = g.matmul_t(x, w1, false, true).unwrap();
    let h = g.sigmoid(h).unwrap();
    let z = g.matmul_t(h, w2, false, true).unwrap();
    let bb = g.expand(b2, 1, 3, 1, &[1, 3]).unwrap();
    let z = g.add(z, bb).unwrap();
    let lse = g.logsumexp_rows(z).unwrap();
    let onehot = g.constant(Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap());
    let picked = g.dot(z, onehot).unwrap();
    let lse = g.sum(lse).unwrap();
    let loss = g.sub(lse, picked).unwrap();
    let params = vec![w1, w2, b2];
    let grads = g.derive(loss, &params).unwrap();
    let norms: Vec<Expr> = grads
        .iter()
        .map(|&gr| {
            let s = g.square(gr).unwrap();
            g.sum(s).unwrap()
        })
        .collect();
    let total = g.add_all(&norms).unwrap();
    (g, x, params, total)
}

#[test]
fn gradient_of_gradient_norm_on_two_layer_mlp() {
    let (mut g, x, params, total) = gradient_norm_graph();
    let dx = g.derive(total, &[x]).unwrap()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let values: Vec<Tensor> = params
        .iter()
        .map(|&p| random(&mut rng, g.shape(p), -1.0, 1.0))
        .collect();
    for _ in 0..10 {
        let at = random(&mut rng, &[1, 5], 0.0, 1.0);
        let mut b = Bindings::new();
        b.bind_all(&params, &values);
        let analytic = g.eval(dx, &b.clone().with(x, &at)).unwrap();
        let numeric = finite_diff(
            |t| Ok(g.eval(total, &b.clone().with(x, t))?.item()),
            &at,
            1e-5,
        )
        .unwrap();
        let err = rel_err(&analytic, &numeric);
        assert!(err < 1e-3, "relative error {err:e}");
    }
}

#[test]
fn derive_is_deterministic() {
    let run = || {
        let (mut g, x, params, total) = gradient_norm_graph();
        let dx = g.derive(total, &[x]).unwrap()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let values: Vec<Tensor> = params
            .iter()
            .map(|&p| random(&mut rng, g.shape(p), -1.0, 1.0))
            .collect();
        let at = random(&mut rng, &[1, 5], 0.0, 1.0);
        let mut b = Bindings::new();
        b.bind_all(&params, &values);
        b.bind(x, &at);
        g.eval(dx, &b).unwrap().into_data()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn derive_rejects_bad_roots_and_targets() {
    let mut g = Graph::new();
    let x = g.leaf("x", &[2]);
    let y = g.square(x).unwrap();
    assert!(matches!(g.derive(y, &[x]), Err(GraphError::NonScalarRoot(_))));
    let s = g.sum(y).unwrap();
    assert!(matches!(g.derive(s, &[y]), Err(GraphError::NotALeaf(_))));
    let other = g.leaf("unused", &[3]);
    let d = g.derive(s, &[other]).unwrap()[0];
    let z = Tensor::zeros(&[3]);
    let two = Tensor::vector(vec![1.0, 1.0]).unwrap();
    let v = g.eval(d, &Bindings::new().with(x, &two).with(other, &z)).unwrap();
    assert_eq!(v.data(), &[0.0, 0.0, 0.0]);
}
