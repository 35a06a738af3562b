use autodiff::{Bindings, Expr, Graph, Plan, Tensor};

use super::config::{DiscrepancyKind, InversionConfig};
use super::task::InversionTask;
use crate::error::{Error, Result};
use crate::image::ImageShape;
use crate::models::{bn_exprs, mean_cross_entropy, one_hot, BnStats, ClassifierModel, GeneratorModel};

/// Discrepancy between two flattened gradients.
pub fn discrepancy(a: &[f64], b: &[f64], kind: DiscrepancyKind) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Discrepancy(format!("lengths {} and {}", a.len(), b.len())));
    }
    match kind {
        DiscrepancyKind::L2 => Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()),
        DiscrepancyKind::NegCosine => {
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(Error::Discrepancy("cosine of a zero gradient is undefined".into()));
            }
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            Ok((-dot / (na * nb)).clamp(-1.0, 1.0))
        }
    }
}

/// Sum over 4-adjacent pixel pairs of squared channel differences.
pub fn tv_regularizer(x: &Tensor, shape: ImageShape) -> Result<f64> {
    if x.numel() != shape.len() {
        return Err(Error::Shape(format!("{} entries for image {shape:?}", x.numel())));
    }
    let d = x.data();
    let mut total = 0.0;
    for c in 0..shape.channels {
        for y in 0..shape.height {
            for xx in 0..shape.width {
                let v = d[shape.index(c, y, xx)];
                if xx + 1 < shape.width {
                    total += (d[shape.index(c, y, xx + 1)] - v).powi(2);
                }
                if y + 1 < shape.height {
                    total += (d[shape.index(c, y + 1, xx)] - v).powi(2);
                }
            }
        }
    }
    Ok(total)
}

/// `Σ_l ‖μ_l − μ̂_l‖ + ‖σ²_l − σ̂²_l‖` between the statistics of `images`
/// under `model` and `target`.
pub fn bn_regularizer(images: &[Tensor], model: &ClassifierModel, target: &BnStats) -> Result<f64> {
    let stats = crate::models::bn_statistics(model, images)?;
    if stats.layers() != target.layers() {
        return Err(Error::Shape(format!("{} BN layers, target has {}", stats.layers(), target.layers())));
    }
    let dist = |a: &Tensor, b: &Tensor| -> Result<f64> {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!("BN stats {:?} vs target {:?}", a.shape(), b.shape())));
        }
        Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
    };
    let mut total = 0.0;
    for l in 0..stats.layers() {
        total += dist(&stats.means[l], &target.means[l])?;
        total += dist(&stats.variances[l], &target.variances[l])?;
    }
    Ok(total)
}

/// Weights of the cost terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostTerms {
    pub discrepancy: DiscrepancyKind,
    pub lambda_tv: f64,
    pub lambda_bn: f64,
    /// Weight of `Σ_j ‖z_j‖` in latent search.
    pub lambda_z: f64,
    pub image: ImageShape,
}

impl CostTerms {
    pub fn from_config(cfg: &InversionConfig) -> Self {
        Self {
            discrepancy: cfg.discrepancy,
            lambda_tv: cfg.lambda_tv,
            lambda_bn: cfg.lambda_bn,
            lambda_z: 0.0,
            image: cfg.image,
        }
    }

    pub fn plain(discrepancy: DiscrepancyKind) -> Self {
        Self { discrepancy, lambda_tv: 0.0, lambda_bn: 0.0, lambda_z: 0.0, image: ImageShape::GRAY16 }
    }
}

/// What the optimizer moves.
#[derive(Clone, Debug)]
pub enum Search {
    /// The images themselves, `[B, m]`.
    Input,
    /// Latent codes `[B, k]` of a fixed generator.
    Latent(GeneratorModel),
    /// One generator shared by the batch, codes fixed.
    SharedWeights(GeneratorModel, Tensor),
    /// A separate copy of the generator per instance, codes fixed.
    /// Variables are the `B` parameter lists concatenated.
    PerInstanceWeights(GeneratorModel, Tensor),
}

/// The compiled inversion cost for one task and one search space.
///
/// The graph contains the classifier loss gradient `∇_θ ℓ` as symbolic
/// nodes, so differentiating the discrepancy with respect to the search
/// variables is a second-order derivative.
#[derive(Clone, Debug)]
pub struct CostProgram {
    graph: Graph,
    vars: Vec<Expr>,
    fixed: Vec<(Expr, Tensor)>,
    images: Expr,
    cost: Expr,
    full: Plan,
    value: Plan,
    batch: usize,
}

fn leaves(g: &mut Graph, prefix: &str, shapes: &[Vec<usize>]) -> Vec<Expr> {
    shapes.iter().enumerate().map(|(i, s)| g.leaf(format!("{prefix}{i}"), s)).collect()
}

fn check_latents(z: &Tensor, batch: usize, k: usize) -> Result<()> {
    if z.shape() != [batch, k] {
        return Err(Error::Shape(format!("latent codes {:?}, expected [{batch}, {k}]", z.shape())));
    }
    Ok(())
}

impl CostProgram {
    pub fn new(task: &InversionTask, search: Search, terms: &CostTerms) -> Result<Self> {
        task.validate()?;
        let model = &task.model;
        let b = task.batch();
        let m = model.input_dim();
        let mut g = Graph::new();
        let mut fixed: Vec<(Expr, Tensor)> = Vec::new();
        let mut vars = Vec::new();
        let mut penalty = None;

        let images = match &search {
            Search::Input => {
                let x = g.leaf("x", &[b, m]);
                vars.push(x);
                x
            }
            Search::Latent(gen) => {
                check_output(gen, m)?;
                let z = g.leaf("z", &[b, gen.latent_dim()]);
                vars.push(z);
                let shapes: Vec<_> = gen.params().iter().map(|p| p.shape().to_vec()).collect();
                let w = leaves(&mut g, "w", &shapes);
                fixed.extend(w.iter().copied().zip(gen.params().iter().cloned()));
                if terms.lambda_z > 0.0 {
                    let sq = g.square(z)?;
                    let rows = g.sum_keep(sq, 1, b, gen.latent_dim())?;
                    let norms = g.sqrt(rows)?;
                    let total = g.sum(norms)?;
                    penalty = Some(g.scale(total, terms.lambda_z)?);
                }
                gen.build_forward(&mut g, z, &w)?
            }
            Search::SharedWeights(gen, z) => {
                check_output(gen, m)?;
                check_latents(z, b, gen.latent_dim())?;
                let zl = g.leaf("z", &[b, gen.latent_dim()]);
                fixed.push((zl, z.clone()));
                let shapes: Vec<_> = gen.params().iter().map(|p| p.shape().to_vec()).collect();
                let w = leaves(&mut g, "w", &shapes);
                vars.extend(&w);
                gen.build_forward(&mut g, zl, &w)?
            }
            Search::PerInstanceWeights(gen, z) => {
                check_output(gen, m)?;
                let k = gen.latent_dim();
                check_latents(z, b, k)?;
                let shapes: Vec<_> = gen.params().iter().map(|p| p.shape().to_vec()).collect();
                let mut rows = Vec::with_capacity(b);
                for j in 0..b {
                    let zj = g.leaf(format!("z{j}"), &[1, k]);
                    fixed.push((zj, Tensor::new(vec![1, k], z.row(j).to_vec())?));
                    let w = leaves(&mut g, &format!("w{j}_"), &shapes);
                    vars.extend(&w);
                    let out = gen.build_forward(&mut g, zj, &w)?;
                    if b == 1 {
                        rows.push(out);
                    } else {
                        let mut e = vec![0.0; b];
                        e[j] = 1.0;
                        let col = g.constant(Tensor::new(vec![b, 1], e)?);
                        rows.push(g.matmul(col, out)?);
                    }
                }
                g.add_all(&rows)?
            }
        };

        let theta_vals = model.param_tensors();
        let theta = leaves(&mut g, "theta", &model.param_shapes());
        fixed.extend(theta.iter().copied().zip(theta_vals));
        let y = g.leaf("y", &[b, model.label_count()]);
        fixed.push((y, one_hot(&task.labels, model.label_count())?));
        let fwd = model.build_forward(&mut g, images, &theta)?;
        let loss = mean_cross_entropy(&mut g, fwd.logits, y)?;
        let grads = g.derive(loss, &theta)?;
        let targets = leaves(&mut g, "g", &model.param_shapes());
        fixed.extend(targets.iter().copied().zip(task.report.gradients.iter().cloned()));
        let mut terms_e = vec![graph_discrepancy(&mut g, &grads, &targets, &task.report.gradients, terms.discrepancy)?];

        if terms.lambda_tv > 0.0 {
            let tv = graph_tv(&mut g, images, terms.image)?;
            terms_e.push(g.scale(tv, terms.lambda_tv)?);
        }
        if let (Some(target), true) = (&task.bn_stats, terms.lambda_bn > 0.0) {
            let stats = bn_exprs(&mut g, &fwd.hidden)?;
            let mut parts = Vec::new();
            for (l, (mean, var)) in stats.into_iter().enumerate() {
                for (e, t, name) in [(mean, &target.means[l], "mu"), (var, &target.variances[l], "var")] {
                    if g.shape(e) != t.shape() {
                        return Err(Error::Shape(format!("BN target {:?} vs {:?}", t.shape(), g.shape(e))));
                    }
                    let tl = g.leaf(format!("bn_{name}{l}"), t.shape());
                    fixed.push((tl, t.clone()));
                    let d = g.sub(e, tl)?;
                    parts.push(g.norm(d)?);
                }
            }
            let bn = g.add_all(&parts)?;
            terms_e.push(g.scale(bn, terms.lambda_bn)?);
        }
        if let Some(p) = penalty {
            terms_e.push(p);
        }
        let cost = g.add_all(&terms_e)?;
        let dvars = g.derive(cost, &vars)?;
        let mut roots = vec![cost];
        roots.extend(dvars);
        let full = g.plan(&roots)?;
        let value = g.plan(&[cost])?;
        Ok(Self { graph: g, vars, fixed, images, cost, full, value, batch: b })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn var_shapes(&self) -> Vec<Vec<usize>> {
        self.vars.iter().map(|&v| self.graph.shape(v).to_vec()).collect()
    }

    fn bindings<'a>(&'a self, vars: &'a [Tensor]) -> Result<Bindings<'a>> {
        if vars.len() != self.vars.len() {
            return Err(Error::Shape(format!("{} variables, expected {}", vars.len(), self.vars.len())));
        }
        let mut b = Bindings::new();
        for (e, t) in &self.fixed {
            b.bind(*e, t);
        }
        b.bind_all(&self.vars, vars);
        Ok(b)
    }

    /// Cost and its gradient with respect to every variable.
    pub fn evaluate(&self, vars: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
        let mut out = self.full.run(&self.graph, &self.bindings(vars)?)?;
        let grads = out.split_off(1);
        Ok((out[0].item(), grads))
    }

    pub fn cost(&self, vars: &[Tensor]) -> Result<f64> {
        Ok(self.value.run(&self.graph, &self.bindings(vars)?)?[0].item())
    }

    /// Unclamped `[B, m]` images at `vars`.
    pub fn images(&self, vars: &[Tensor]) -> Result<Tensor> {
        Ok(self.graph.eval(self.images, &self.bindings(vars)?)?)
    }

    pub fn cost_expr(&self) -> Expr {
        self.cost
    }
}

fn check_output(gen: &GeneratorModel, m: usize) -> Result<()> {
    if gen.output_dim() != m {
        return Err(Error::Shape(format!("generator emits {} values, classifier expects {m}", gen.output_dim())));
    }
    Ok(())
}

fn sum_sq(g: &mut Graph, xs: &[Expr]) -> Result<Expr> {
    let parts = xs
        .iter()
        .map(|&x| {
            let s = g.square(x)?;
            g.sum(s)
        })
        .collect::<autodiff::Result<Vec<_>>>()?;
    Ok(g.add_all(&parts)?)
}

fn graph_discrepancy(
    g: &mut Graph,
    grads: &[Expr],
    targets: &[Expr],
    target_vals: &[Tensor],
    kind: DiscrepancyKind,
) -> Result<Expr> {
    match kind {
        DiscrepancyKind::L2 => {
            let diffs = grads
                .iter()
                .zip(targets)
                .map(|(&a, &t)| g.sub(a, t))
                .collect::<autodiff::Result<Vec<_>>>()?;
            let ss = sum_sq(g, &diffs)?;
            Ok(g.sqrt(ss)?)
        }
        DiscrepancyKind::NegCosine => {
            let tnorm = target_vals.iter().map(|t| t.dot(t)).sum::<f64>().sqrt();
            if tnorm == 0.0 {
                return Err(Error::Discrepancy("target gradient is zero; cosine undefined".into()));
            }
            let dots = grads
                .iter()
                .zip(targets)
                .map(|(&a, &t)| g.dot(a, t))
                .collect::<autodiff::Result<Vec<_>>>()?;
            let dot = g.add_all(&dots)?;
            let ss = sum_sq(g, grads)?;
            let inv = g.pow(ss, -0.5)?;
            let cos = g.mul(dot, inv)?;
            Ok(g.scale(cos, -1.0 / tnorm)?)
        }
    }
}

/// Total variation of a `[B, m]` image batch, summed over the batch.
fn graph_tv(g: &mut Graph, images: Expr, shape: ImageShape) -> Result<Expr> {
    let (b, m) = (g.shape(images)[0], g.shape(images)[1]);
    if m != shape.len() {
        return Err(Error::Shape(format!("images of {m} values do not match {shape:?}")));
    }
    let planes = g.reshape(images, &[b * shape.channels, 1, shape.height, shape.width])?;
    let mut parts = Vec::new();
    if shape.width > 1 {
        let k = g.constant(Tensor::new(vec![1, 1, 1, 2], vec![-1.0, 1.0])?);
        let d = g.conv2d(planes, k, 1, 0)?;
        let s = g.square(d)?;
        parts.push(g.sum(s)?);
    }
    if shape.height > 1 {
        let k = g.constant(Tensor::new(vec![1, 1, 2, 1], vec![-1.0, 1.0])?);
        let d = g.conv2d(planes, k, 1, 0)?;
        let s = g.square(d)?;
        parts.push(g.sum(s)?);
    }
    if parts.is_empty() {
        let zero = g.scale(images, 0.0)?;
        return Ok(g.sum(zero)?);
    }
    Ok(g.add_all(&parts)?)
}

/// The inversion cost of candidate `images` for `task`.
pub fn cost(images: &[Tensor], task: &InversionTask, terms: &CostTerms) -> Result<f64> {
    let prog = CostProgram::new(task, Search::Input, terms)?;
    let xs = crate::models::stack(images)?;
    prog.cost(&[xs])
}
