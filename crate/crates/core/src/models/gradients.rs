use autodiff::{Bindings, Expr, Graph, Plan, Tensor};

use super::classifier::ClassifierModel;
use super::report::{BnStats, GradientReport};
use crate::error::{Error, Result};

/// `[B, L]` one-hot rows.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        data[i * classes + y] = 1.0;
    }
    Ok(Tensor::new(vec![labels.len(), classes], data)?)
}

/// `-log softmax(logits)[y]` for a single logit vector.
pub fn cross_entropy(logits: &Tensor, y: usize) -> Result<f64> {
    let l = logits.data();
    if y >= l.len() {
        return Err(Error::LabelOutOfRange { label: y, classes: l.len() });
    }
    let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + l.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok((lse - l[y]).max(0.0))
}

/// Mean softmax cross-entropy of `[B, L]` logits against one-hot rows.
pub(crate) fn mean_cross_entropy(g: &mut Graph, logits: Expr, onehot: Expr) -> Result<Expr> {
    let b = g.shape(logits)[0];
    let lse = g.logsumexp_rows(logits)?;
    let total = g.sum(lse)?;
    let picked = g.dot(logits, onehot)?;
    let diff = g.sub(total, picked)?;
    Ok(g.scale(diff, 1.0 / b as f64)?)
}

/// Per-channel population mean and variance expressions for hidden
/// activations laid out `[B, C*S]`.
pub(crate) fn bn_exprs(g: &mut Graph, hidden: &[(Expr, usize, usize)]) -> Result<Vec<(Expr, Expr)>> {
    hidden
        .iter()
        .map(|&(h, c, s)| {
            let b = g.shape(h)[0];
            let shape = g.shape(h).to_vec();
            let n = (b * s) as f64;
            let sum = g.sum_keep(h, b, c, s)?;
            let mean = g.scale(sum, 1.0 / n)?;
            let me = g.expand(mean, b, c, s, &shape)?;
            let centered = g.sub(h, me)?;
            let sq = g.square(centered)?;
            let ss = g.sum_keep(sq, b, c, s)?;
            let var = g.scale(ss, 1.0 / n)?;
            Ok((mean, var))
        })
        .collect()
}

/// A compiled loss-gradient computation for one architecture and batch size.
///
/// Building the graph dominates the cost of a single gradient; reuse the
/// program when many gradients of the same shape are needed.
#[derive(Clone, Debug)]
pub struct GradientProgram {
    graph: Graph,
    batch: usize,
    classes: usize,
    x: Expr,
    onehot: Expr,
    params: Vec<Expr>,
    loss: Expr,
    grad_plan: Plan,
    bn_plan: Plan,
    hidden: usize,
}

impl GradientProgram {
    pub fn new(model: &ClassifierModel, batch: usize) -> Result<Self> {
        if batch == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut g = Graph::new();
        let x = g.leaf("x", &[batch, model.input_dim()]);
        let onehot = g.leaf("y", &[batch, model.label_count()]);
        let params: Vec<Expr> = model
            .params()
            .iter()
            .enumerate()
            .map(|(i, p)| g.leaf(format!("theta{i}"), p.shape()))
            .collect();
        let fwd = model.build_forward(&mut g, x, &params)?;
        let loss = mean_cross_entropy(&mut g, fwd.logits, onehot)?;
        let grads = g.derive(loss, &params)?;
        let stats = bn_exprs(&mut g, &fwd.hidden)?;
        let mut bn_roots = Vec::new();
        for (m, v) in &stats {
            bn_roots.push(*m);
            bn_roots.push(*v);
        }
        let grad_plan = g.plan(&grads)?;
        let bn_plan = g.plan(&bn_roots)?;
        Ok(Self {
            graph: g,
            batch,
            classes: model.label_count(),
            x,
            onehot,
            params,
            loss,
            grad_plan,
            bn_plan,
            hidden: stats.len(),
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    fn check(&self, params: &[Tensor], xs: &Tensor) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!("{} parameters, expected {}", params.len(), self.params.len())));
        }
        let want = self.graph.shape(self.x);
        if xs.shape() != want {
            return Err(Error::Shape(format!("batch {:?}, expected {want:?}", xs.shape())));
        }
        Ok(())
    }

    /// Mean loss gradient for parameters `params` on `[B, m]` inputs.
    pub fn gradients(&self, params: &[Tensor], xs: &Tensor, labels: &[usize]) -> Result<Vec<Tensor>> {
        self.check(params, xs)?;
        if labels.len() != self.batch {
            return Err(Error::Shape(format!("{} labels for batch {}", labels.len(), self.batch)));
        }
        let y = one_hot(labels, self.classes)?;
        let mut b = Bindings::new();
        b.bind(self.x, xs).bind(self.onehot, &y).bind_all(&self.params, params);
        Ok(self.grad_plan.run(&self.graph, &b)?)
    }

    pub fn loss(&self, params: &[Tensor], xs: &Tensor, labels: &[usize]) -> Result<f64> {
        self.check(params, xs)?;
        let y = one_hot(labels, self.classes)?;
        let mut b = Bindings::new();
        b.bind(self.x, xs).bind(self.onehot, &y).bind_all(&self.params, params);
        Ok(self.graph.eval(self.loss, &b)?.item())
    }

    pub fn bn_statistics(&self, params: &[Tensor], xs: &Tensor) -> Result<BnStats> {
        self.check(params, xs)?;
        let mut b = Bindings::new();
        b.bind(self.x, xs).bind_all(&self.params, params);
        let vals = self.bn_plan.run(&self.graph, &b)?;
        let mut it = vals.into_iter();
        let mut stats = BnStats { means: Vec::new(), variances: Vec::new() };
        for _ in 0..self.hidden {
            stats.means.push(it.next().expect("mean"));
            // Rounding can leave a tiny negative variance.
            stats.variances.push(it.next().expect("variance").map(|v| v.max(0.0)));
        }
        Ok(stats)
    }
}

/// Stacks equally sized images into a `[B, m]` tensor.
pub fn stack(images: &[Tensor]) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::EmptyBatch);
    };
    let m = first.numel();
    let mut data = Vec::with_capacity(images.len() * m);
    for im in images {
        if im.numel() != m {
            return Err(Error::Shape(format!("image of {} entries, expected {m}", im.numel())));
        }
        data.extend_from_slice(im.data());
    }
    Ok(Tensor::new(vec![images.len(), m], data)?)
}

/// The averaged loss gradient a node reports for `images` with `labels`.
///
/// Inputs are expected in `[0, 1]`. `with_bn` attaches the exact batch
/// statistics of every hidden layer.
pub fn batch_gradient(
    model: &ClassifierModel,
    images: &[Tensor],
    labels: &[usize],
    with_bn: bool,
) -> Result<GradientReport> {
    if images.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let xs = stack(images)?;
    let prog = GradientProgram::new(model, images.len())?;
    let params = model.param_tensors();
    let gradients = prog.gradients(&params, &xs, labels)?;
    let bn_stats = if with_bn { Some(prog.bn_statistics(&params, &xs)?) } else { None };
    Ok(GradientReport {
        model_id: model.fingerprint(),
        gradients,
        batch_size: images.len(),
        labels: Some(labels.to_vec()),
        bn_stats,
        round: 0,
        node: 0,
    })
}

/// Exact per-channel statistics of the post-activation hidden layers.
pub fn bn_statistics(model: &ClassifierModel, images: &[Tensor]) -> Result<BnStats> {
    let xs = stack(images)?;
    GradientProgram::new(model, images.len())?.bn_statistics(&model.param_tensors(), &xs)
}

/// Magnitude below which a bias-gradient entry is treated as zero.
pub const LABEL_THRESHOLD: f64 = 1e-12;

/// Recovers the label of a single-example report from the sign of the final
/// bias gradient, `p - onehot(y)`, whose only negative entry is at `y`.
pub fn recover_labels(report: &GradientReport, model: &ClassifierModel) -> Result<Vec<usize>> {
    report.check_shapes(&model.param_shapes())?;
    if report.batch_size != 1 {
        return Err(Error::Unsupported(format!(
            "sign-based label recovery needs batch size 1, got {}; supply labels",
            report.batch_size
        )));
    }
    let gb = report.gradients[model.final_bias_index()].data();
    let neg: Vec<usize> = (0..gb.len()).filter(|&i| gb[i] < -LABEL_THRESHOLD).collect();
    match neg.as_slice() {
        [y] => Ok(vec![*y]),
        _ => Err(Error::LabelRecovery { min: gb.iter().cloned().fold(f64::INFINITY, f64::min) }),
    }
}
