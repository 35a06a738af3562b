//! Recursive analytic inversion of single-sample dense networks.
//!
//! At batch size 1 the weight gradient of a dense layer is the outer product
//! `∇W_r = δ_r x_{r−1}ᵀ`, so every row `i` with `δ_r[i] ≠ 0` states
//! `δ_r[i]·x_{r−1} = ∇W_r[i,:]`. Stacking those rows gives the system
//! `A_r = δ' ⊗ I`, `b_r = (∇W_r[i,:])_i` whose solution is `x_{r−1}`.
//!
//! The top signal `δ_R = p − onehot(y)` is read off the final bias gradient.
//! Lower signals are backpropagated through the reconstructed activations,
//! `δ_{r−1} = σ'(u_{r−1}) ⊙ W_rᵀ δ_r`, so the label never has to be known
//! separately.
//!
//! A layer whose weight gradient is identically zero (frozen, or sparsified
//! away) carries no gradient signal. It falls back to the forward system
//! `W_r x_{r−1} = σ_r⁻¹(x̂_r) − b_r`, which is under-determined whenever the
//! layer narrows (`inputs > outputs`). Those are the layers generative
//! replacement is meant for.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use autodiff::{Bindings, Graph, Tensor};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inversion::{gaussian, scheduled_lr, Adam};
use crate::models::{Activation, ClassifierModel, GeneratorModel, GradientReport, LayerSpec};

/// `δ` entries at or below this magnitude are treated as zero.
pub const DELTA_THRESHOLD: f64 = 1e-12;
/// Relative singular-value cutoff of the pseudo-inverse.
pub const PINV_RTOL: f64 = 1e-10;
/// Margin used when an activation inverse is clamped into its domain.
pub const CLAMP_MARGIN: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SystemKind {
    /// Rows taken from the weight gradient.
    Gradient,
    /// The layer's forward equation, used when the gradient is withheld.
    Forward,
}

impl SystemKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SystemKind::Gradient => "gradient",
            SystemKind::Forward => "forward",
        }
    }
}

/// `A_r x_{r−1} = b_r` for one layer `r` (1-based, counted from the input).
#[derive(Clone, Debug)]
pub struct LayerSystem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub layer: usize,
    pub kind: SystemKind,
    /// Numerical rank, set once the system is solved.
    pub rank: Option<usize>,
    /// `‖A x̂ − b‖` of the chosen solution.
    pub residual: Option<f64>,
}

impl LayerSystem {
    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn cols(&self) -> usize {
        self.a.ncols()
    }

    pub fn residual_of(&self, x: &[f64]) -> f64 {
        let x = DVector::from_column_slice(x);
        (&self.a * x - &self.b).norm()
    }

    /// Whether the system pins down `x` uniquely.
    pub fn is_determined(&self) -> bool {
        self.rank.unwrap_or_else(|| numeric_rank(&self.a)) == self.cols()
    }
}

fn check_dense_single(model: &ClassifierModel, report: &GradientReport) -> Result<()> {
    if report.batch_size != 1 {
        return Err(Error::Unsupported(format!(
            "analytic recursion needs batch size 1, got {}",
            report.batch_size
        )));
    }
    if model.layers().iter().any(|l| !matches!(l.spec, LayerSpec::Dense { .. })) {
        return Err(Error::Unsupported("analytic recursion supports dense layers only".into()));
    }
    report.check_shapes(&model.param_shapes())
}

fn weight_index(model: &ClassifierModel, r: usize) -> usize {
    model.layers()[..r - 1].iter().map(|l| 1 + usize::from(l.bias.is_some())).sum()
}

fn check_layer(model: &ClassifierModel, r: usize) -> Result<(usize, usize)> {
    match model.layers().get(r.wrapping_sub(1)).map(|l| &l.spec) {
        Some(LayerSpec::Dense { inputs, outputs, .. }) => Ok((*inputs, *outputs)),
        Some(_) => Err(Error::Unsupported(format!("layer {r} is not dense"))),
        None => Err(Error::Config(format!("layer {r} out of range 1..={}", model.layers().len()))),
    }
}

/// Stacks the gradient rows of layer `r` whose signal `δ_r[i]` is nonzero.
pub fn build_layer_system(model: &ClassifierModel, r: usize, delta: &[f64], grad: &Tensor) -> Result<LayerSystem> {
    let (n, out) = check_layer(model, r)?;
    if delta.len() != out || grad.shape() != [out, n] {
        return Err(Error::Shape(format!(
            "layer {r}: δ has {} entries and gradient {:?}, expected {out} and [{out}, {n}]",
            delta.len(),
            grad.shape()
        )));
    }
    let active: Vec<usize> = (0..out).filter(|&i| delta[i].abs() > DELTA_THRESHOLD).collect();
    if active.is_empty() {
        return Err(Error::NoSignal { layer: r });
    }
    let rows = active.len() * n;
    let mut a = DMatrix::zeros(rows, n);
    let mut b = DVector::zeros(rows);
    for (k, &i) in active.iter().enumerate() {
        for j in 0..n {
            a[(k * n + j, j)] = delta[i];
            b[k * n + j] = grad.row(i)[j];
        }
    }
    Ok(LayerSystem { a, b, layer: r, kind: SystemKind::Gradient, rank: None, residual: None })
}

/// Inverts a layer's activation, clamping values outside its range.
fn invert_activation(act: Activation, v: &[f64], layer: usize, warnings: &mut Vec<String>) -> Vec<f64> {
    let mut clamped = 0;
    let u = v
        .iter()
        .map(|&y| match act {
            Activation::Sigmoid => {
                let c = y.clamp(CLAMP_MARGIN, 1.0 - CLAMP_MARGIN);
                clamped += usize::from(c != y);
                (c / (1.0 - c)).ln()
            }
            Activation::Elu => {
                if y > 0.0 {
                    y
                } else {
                    let c = y.max(-1.0 + CLAMP_MARGIN);
                    clamped += usize::from(c != y);
                    c.ln_1p()
                }
            }
            Activation::None => y,
        })
        .collect();
    if clamped > 0 {
        warnings.push(format!("layer {layer}: clamped {clamped} values into the activation range"));
    }
    u
}

/// `σ'(u)` expressed through the activation output.
fn activation_slope(act: Activation, y: f64) -> f64 {
    match act {
        Activation::Sigmoid => {
            let c = y.clamp(CLAMP_MARGIN, 1.0 - CLAMP_MARGIN);
            c * (1.0 - c)
        }
        Activation::Elu => {
            if y > 0.0 {
                1.0
            } else {
                (y + 1.0).max(0.0)
            }
        }
        Activation::None => 1.0,
    }
}

/// Forward equation `W_r x = σ_r⁻¹(x_r) − b_r` of layer `r` given its
/// reconstructed output.
pub fn forward_system(
    model: &ClassifierModel,
    r: usize,
    output: &[f64],
    warnings: &mut Vec<String>,
) -> Result<LayerSystem> {
    let (n, out) = check_layer(model, r)?;
    if output.len() != out {
        return Err(Error::Shape(format!("layer {r} output has {} entries, expected {out}", output.len())));
    }
    let layer = &model.layers()[r - 1];
    let mut u = invert_activation(layer.spec.activation(), output, r, warnings);
    if let Some(bias) = &layer.bias {
        for (ui, bi) in u.iter_mut().zip(bias.data()) {
            *ui -= bi;
        }
    }
    Ok(LayerSystem {
        a: DMatrix::from_row_slice(out, n, layer.weight.data()),
        b: DVector::from_vec(u),
        layer: r,
        kind: SystemKind::Forward,
        rank: None,
        residual: None,
    })
}

fn numeric_rank(a: &DMatrix<f64>) -> usize {
    let s = a.clone().singular_values();
    let cut = PINV_RTOL * s.max();
    s.iter().filter(|&&v| v > cut && v > 0.0).count()
}

/// Thin SVD restricted to singular values above the cutoff.
struct Truncated {
    u: DMatrix<f64>,
    sigma: Vec<f64>,
    v_t: DMatrix<f64>,
}

fn truncated_svd(a: &DMatrix<f64>) -> Truncated {
    let svd = a.clone().svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| {
            let s = svd.singular_values[i];
            s > 0.0 && s > PINV_RTOL * smax
        })
        .collect();
    Truncated {
        u: u.select_columns(&keep),
        sigma: keep.iter().map(|&i| svd.singular_values[i]).collect(),
        v_t: v_t.select_rows(&keep),
    }
}

/// Minimum-norm least-squares solution `A†b`. Records rank and residual.
pub fn solve_pinv(sys: &mut LayerSystem) -> Tensor {
    let t = truncated_svd(&sys.a);
    let mut coef = t.u.transpose() * &sys.b;
    for (c, s) in coef.iter_mut().zip(&t.sigma) {
        *c /= s;
    }
    let x = t.v_t.transpose() * coef;
    sys.rank = Some(t.sigma.len());
    sys.residual = Some((&sys.a * &x - &sys.b).norm());
    Tensor::new(vec![x.len()], x.as_slice().to_vec()).expect("vector shape")
}

/// Settings of the latent search used by generative replacement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatentFit {
    pub iterations: usize,
    pub lr: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for LatentFit {
    fn default() -> Self {
        Self { iterations: 500, lr: 3e-2, restarts: 4, seed: 0 }
    }
}

/// One reconstructed activation.
#[derive(Clone, Debug)]
pub struct LayerRecon {
    pub system: LayerSystem,
    /// `x̂_{r−1}` for the system's layer `r`.
    pub estimate: Tensor,
    /// Latent code when the layer was solved through the generator.
    pub latent: Option<Tensor>,
}

impl LayerRecon {
    /// Index of the reconstructed activation (0 is the input).
    pub fn activation(&self) -> usize {
        self.system.layer - 1
    }
}

#[derive(Clone, Debug)]
pub struct RgapResult {
    /// Top-down: the first entry reconstructs the last hidden activation.
    pub layers: Vec<LayerRecon>,
    pub warnings: Vec<String>,
}

impl RgapResult {
    pub fn input(&self) -> &Tensor {
        &self.layers.last().expect("at least one layer").estimate
    }

    /// Relative error `‖x̂_j − x_j‖/‖x_j‖` of every reconstructed activation
    /// against a known input, in the order of `layers`.
    pub fn layer_errors(&self, model: &ClassifierModel, truth: &Tensor) -> Result<Vec<f64>> {
        let acts = model.activations(truth.data(), 1)?;
        Ok(self
            .layers
            .iter()
            .map(|l| {
                let j = l.activation();
                let t: &[f64] = if j == 0 { truth.data() } else { &acts[j - 1] };
                let num: f64 = l.estimate.data().iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum();
                let den: f64 = t.iter().map(|v| v * v).sum();
                (num / den.max(f64::MIN_POSITIVE)).sqrt()
            })
            .collect())
    }

    /// Writes `layer,kind,rank,residual,recon_error` rows, top-down.
    pub fn write_csv(&self, path: &Path, errors: Option<&[f64]>) -> Result<()> {
        let mut out = String::from("layer,kind,rank,residual,recon_error\n");
        for (i, l) in self.layers.iter().enumerate() {
            let err = errors.and_then(|e| e.get(i)).map(|v| format!("{v:.6e}")).unwrap_or_else(|| "n/a".into());
            out.push_str(&format!(
                "{},{},{},{:.6e},{}\n",
                l.activation(),
                if l.latent.is_some() { "generative" } else { l.system.kind.as_str() },
                l.system.rank.map_or(String::new(), |r| r.to_string()),
                l.system.residual.unwrap_or(f64::NAN),
                err
            ));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Solves every layer by pseudo-inverse, from the top down to the input.
pub fn rgap_recursive(model: &ClassifierModel, report: &GradientReport) -> Result<RgapResult> {
    recurse(model, report, None, &BTreeSet::new())
}

/// Like [`rgap_recursive`], but the layers in `replace` are solved by
/// searching the generator's latent space: `min_z ‖A_r f_{r−1}(G(z)) − b_r‖`.
pub fn rgap_generative(
    model: &ClassifierModel,
    report: &GradientReport,
    generator: &GeneratorModel,
    replace: &BTreeSet<usize>,
    fit: &LatentFit,
) -> Result<RgapResult> {
    if replace.is_empty() {
        return Err(Error::Config("generative replacement needs at least one layer".into()));
    }
    if generator.output_dim() != model.input_dim() {
        return Err(Error::Incompatible(format!(
            "generator output {} vs classifier input {}",
            generator.output_dim(),
            model.input_dim()
        )));
    }
    recurse(model, report, Some((generator, fit)), replace)
}

fn recurse(
    model: &ClassifierModel,
    report: &GradientReport,
    generator: Option<(&GeneratorModel, &LatentFit)>,
    replace: &BTreeSet<usize>,
) -> Result<RgapResult> {
    check_dense_single(model, report)?;
    let depth = model.layers().len();
    if let Some(&r) = replace.iter().find(|&&r| r == 0 || r > depth) {
        return Err(Error::Config(format!("layer {r} out of range 1..={depth}")));
    }
    let mut delta = report.gradients[model.final_bias_index()].data().to_vec();
    let mut warnings = Vec::new();
    let mut layers = Vec::new();
    let mut above: Option<Vec<f64>> = None;
    for r in (1..=depth).rev() {
        let grad = &report.gradients[weight_index(model, r)];
        let has_grad = grad.data().iter().any(|&v| v != 0.0);
        let mut system = match (has_grad, &above) {
            (true, _) => build_layer_system(model, r, &delta, grad)?,
            (false, Some(x)) => forward_system(model, r, x, &mut warnings)?,
            (false, None) => return Err(Error::NoSignal { layer: r }),
        };
        let (estimate, latent) = match generator.filter(|_| replace.contains(&r)) {
            Some((gen, fit)) => {
                let (x, z) = latent_solve(model, r, &mut system, gen, fit)?;
                (x, Some(z))
            }
            None => (solve_pinv(&mut system), None),
        };
        if r > 1 {
            let w = &model.layers()[r - 1].weight;
            let act = model.layers()[r - 2].spec.activation();
            let (out, n) = (w.shape()[0], w.shape()[1]);
            delta = (0..n)
                .map(|j| {
                    let back: f64 = (0..out).map(|i| w.data()[i * n + j] * delta[i]).sum();
                    activation_slope(act, estimate.data()[j]) * back
                })
                .collect();
        }
        above = Some(estimate.data().to_vec());
        layers.push(LayerRecon { system, estimate, latent });
    }
    Ok(RgapResult { layers, warnings })
}

/// Gradient descent on `z` for `‖A f_{r−1}(G(z)) − b‖`.
///
/// The objective is rewritten through the thin SVD `A = UΣVᵀ` as
/// `‖ΣVᵀx − Uᵀb‖² + ‖b‖² − ‖Uᵀb‖²`, which has the same minimizer and value
/// but avoids carrying the tall stacked matrix through the graph.
fn latent_solve(
    model: &ClassifierModel,
    r: usize,
    system: &mut LayerSystem,
    gen: &GeneratorModel,
    fit: &LatentFit,
) -> Result<(Tensor, Tensor)> {
    let t = truncated_svd(&system.a);
    let q = t.sigma.len();
    let n = system.cols();
    let mut m = t.v_t.clone();
    for (i, s) in t.sigma.iter().enumerate() {
        m.row_mut(i).scale_mut(*s);
    }
    let c = t.u.transpose() * &system.b;
    let floor = (system.b.norm_squared() - c.norm_squared()).max(0.0);

    let mut g = Graph::new();
    let k = gen.latent_dim();
    let z = g.leaf("z", &[1, k]);
    let gp: Vec<_> = gen.params().iter().map(|p| g.constant(p.clone())).collect();
    let mp: Vec<_> = model.params().into_iter().map(|p| g.constant(p.clone())).collect();
    let x0 = gen.build_forward(&mut g, z, &gp)?;
    let h = model.build_prefix(&mut g, x0, &mp, r - 1)?;
    let col = g.reshape(h, &[n, 1])?;
    let mc = g.constant(Tensor::new(vec![q, n], m.transpose().as_slice().to_vec())?);
    let cc = g.constant(Tensor::new(vec![q, 1], c.as_slice().to_vec())?);
    let proj = g.matmul(mc, col)?;
    let diff = g.sub(proj, cc)?;
    let sq = g.square(diff)?;
    let ss = g.sum(sq)?;
    let cost = g.affine(ss, 1.0, floor)?;
    let cost = g.sqrt(cost)?;
    let grads = g.derive(cost, &[z])?;
    let plan = g.plan(&[cost, grads[0]])?;
    let h_plan = g.plan(&[h])?;

    let mut best: Option<(f64, Tensor)> = None;
    for restart in 0..fit.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(fit.seed.wrapping_add(restart as u64));
        let mut vars = vec![gaussian(&mut rng, &[1, k])];
        let mut opt = Adam::new(&vars);
        for it in 0..fit.iterations {
            let out = plan.run(&g, &Bindings::new().with(z, &vars[0]))?;
            if !out[0].item().is_finite() {
                break;
            }
            opt.step(&mut vars, &out[1..], scheduled_lr(fit.lr, it, fit.iterations));
        }
        let final_cost = plan.run(&g, &Bindings::new().with(z, &vars[0]))?[0].item();
        if final_cost.is_finite() && best.as_ref().is_none_or(|(b, _)| final_cost < *b) {
            best = Some((final_cost, vars.pop().expect("one var")));
        }
    }
    let (_, zbest) = best.ok_or(Error::AllRestartsDiverged)?;
    let x = h_plan.run(&g, &Bindings::new().with(z, &zbest))?.pop().expect("one root");
    let x = x.reshape(&[n])?;
    system.rank = Some(q);
    system.residual = Some(system.residual_of(x.data()));
    Ok((x, zbest.reshape(&[k])?))
}
