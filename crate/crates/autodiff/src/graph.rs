//! Expression graph construction.
//!
//! Nodes are appended to an arena and only ever reference earlier nodes, so
//! arena order is a topological order. Shapes are static: every builder call
//! infers the output shape and rejects inconsistent operands up front.

use crate::error::{GraphError, Result};
use crate::kernels::ConvGeom;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Expr(pub(crate) usize);

impl Expr {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise unary functions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Sigmoid,
    /// ELU with unit scale: `u` for `u > 0`, `exp(u) - 1` otherwise.
    Elu,
    /// First derivative of [`Unary::Elu`].
    EluD1,
    /// Second derivative of [`Unary::Elu`]; it is its own derivative.
    EluD2,
    Exp,
    Log,
    /// `coef * u^exp`. At `u == 0` with a negative exponent the value is 0,
    /// which makes `sqrt` differentiable at the origin with subgradient 0.
    Pow { coef: f64, exp: f64 },
    /// `scale * u + shift`.
    Affine { scale: f64, shift: f64 },
}

impl Unary {
    pub(crate) fn apply(self, u: f64) -> f64 {
        match self {
            Unary::Sigmoid => {
                if u >= 0.0 {
                    1.0 / (1.0 + (-u).exp())
                } else {
                    let e = u.exp();
                    e / (1.0 + e)
                }
            }
            Unary::Elu => {
                if u > 0.0 {
                    u
                } else {
                    u.exp_m1()
                }
            }
            Unary::EluD1 => {
                if u > 0.0 {
                    1.0
                } else {
                    u.exp()
                }
            }
            Unary::EluD2 => {
                if u > 0.0 {
                    0.0
                } else {
                    u.exp()
                }
            }
            Unary::Exp => u.exp(),
            Unary::Log => u.ln(),
            Unary::Pow { coef, exp } => {
                if exp == 0.0 {
                    coef
                } else if u == 0.0 && exp < 0.0 {
                    0.0
                } else if exp.fract() == 0.0 && exp.abs() < 64.0 {
                    coef * u.powi(exp as i32)
                } else {
                    coef * u.powf(exp)
                }
            }
            Unary::Affine { scale, shift } => scale * u + shift,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Unary::Sigmoid => "sigmoid",
            Unary::Elu => "elu",
            Unary::EluD1 => "elu_d1",
            Unary::EluD2 => "elu_d2",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Pow { .. } => "pow",
            Unary::Affine { .. } => "affine",
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf { name: String },
    Const(Tensor),
    Unary(Unary, Expr),
    Add(Expr, Expr),
    Sub(Expr, Expr),
    Mul(Expr, Expr),
    MatMul { a: Expr, b: Expr, ta: bool, tb: bool },
    Conv2d { x: Expr, k: Expr, geom: ConvGeom },
    ConvBackInput { dy: Expr, k: Expr, geom: ConvGeom, in_hw: (usize, usize) },
    ConvBackKernel { x: Expr, dy: Expr, geom: ConvGeom, k_hw: (usize, usize) },
    Upsample2x(Expr),
    SumPool2x(Expr),
    Reshape(Expr),
    Sum(Expr),
    Broadcast(Expr),
    SumKeep { x: Expr, outer: usize, mid: usize, inner: usize },
    Expand { v: Expr, outer: usize, mid: usize, inner: usize },
    LogSumExpRows(Expr),
    SoftmaxRows(Expr),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Const(_) => "const",
            Op::Unary(u, _) => u.name(),
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvBackInput { .. } => "conv_back_input",
            Op::ConvBackKernel { .. } => "conv_back_kernel",
            Op::Upsample2x(_) => "upsample2x",
            Op::SumPool2x(_) => "sumpool2x",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Broadcast(_) => "broadcast",
            Op::SumKeep { .. } => "sum_keep",
            Op::Expand { .. } => "expand",
            Op::LogSumExpRows(_) => "logsumexp_rows",
            Op::SoftmaxRows(_) => "softmax_rows",
        }
    }

    pub(crate) fn operands(&self) -> Vec<Expr> {
        match *self {
            Op::Leaf { .. } | Op::Const(_) => Vec::new(),
            Op::Unary(_, x)
            | Op::Upsample2x(x)
            | Op::SumPool2x(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Broadcast(x)
            | Op::LogSumExpRows(x)
            | Op::SoftmaxRows(x) => vec![x],
            Op::SumKeep { x, .. } => vec![x],
            Op::Expand { v, .. } => vec![v],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::MatMul { a, b, .. } => vec![a, b],
            Op::Conv2d { x, k, .. } => vec![x, k],
            Op::ConvBackInput { dy, k, .. } => vec![dy, k],
            Op::ConvBackKernel { x, dy, .. } => vec![x, dy],
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) shape: Vec<usize>,
}

/// An append-only differentiable computation graph.
///
/// Builder methods return a [`Expr`] handle for the new node. Once built, a
/// graph can be evaluated any number of times from multiple threads.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> GraphError {
    GraphError::Shape { op, detail }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, e: Expr) -> Result<()> {
        if e.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(GraphError::ForeignExpr(e.0))
        }
    }

    pub fn shape(&self, e: Expr) -> &[usize] {
        &self.nodes[e.0].shape
    }

    pub fn op_name(&self, e: Expr) -> &'static str {
        self.nodes[e.0].op.name()
    }

    pub fn is_leaf(&self, e: Expr) -> bool {
        matches!(self.nodes.get(e.0).map(|n| &n.op), Some(Op::Leaf { .. }))
    }

    pub fn leaf_name(&self, e: Expr) -> Option<&str> {
        match &self.nodes.get(e.0)?.op {
            Op::Leaf { name } => Some(name),
            _ => None,
        }
    }

    /// Value of a constant node.
    pub fn const_value(&self, e: Expr) -> Option<&Tensor> {
        match &self.nodes.get(e.0)?.op {
            Op::Const(t) => Some(t),
            _ => None,
        }
    }

    pub(crate) fn push(&mut self, op: Op, shape: Vec<usize>) -> Expr {
        self.nodes.push(Node { op, shape });
        Expr(self.nodes.len() - 1)
    }

    /// A named input bound at evaluation time. Leaves are the only valid
    /// differentiation targets.
    pub fn leaf(&mut self, name: impl Into<String>, shape: &[usize]) -> Expr {
        self.push(Op::Leaf { name: name.into() }, shape.to_vec())
    }

    pub fn constant(&mut self, value: Tensor) -> Expr {
        let shape = value.shape().to_vec();
        self.push(Op::Const(value), shape)
    }

    pub fn scalar(&mut self, value: f64) -> Expr {
        self.constant(Tensor::scalar(value))
    }

    pub fn unary(&mut self, f: Unary, x: Expr) -> Result<Expr> {
        self.check(x)?;
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Unary(f, x), shape))
    }

    pub fn sigmoid(&mut self, x: Expr) -> Result<Expr> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn elu(&mut self, x: Expr) -> Result<Expr> {
        self.unary(Unary::Elu, x)
    }

    pub fn exp(&mut self, x: Expr) -> Result<Expr> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Expr) -> Result<Expr> {
        self.unary(Unary::Log, x)
    }

    pub fn pow(&mut self, x: Expr, exp: f64) -> Result<Expr> {
        self.unary(Unary::Pow { coef: 1.0, exp }, x)
    }

    pub fn square(&mut self, x: Expr) -> Result<Expr> {
        self.pow(x, 2.0)
    }

    pub fn sqrt(&mut self, x: Expr) -> Result<Expr> {
        self.pow(x, 0.5)
    }

    pub fn recip(&mut self, x: Expr) -> Result<Expr> {
        self.pow(x, -1.0)
    }

    pub fn affine(&mut self, x: Expr, scale: f64, shift: f64) -> Result<Expr> {
        self.unary(Unary::Affine { scale, shift }, x)
    }

    /// Multiplication by a fixed real.
    pub fn scale(&mut self, x: Expr, c: f64) -> Result<Expr> {
        self.affine(x, c, 0.0)
    }

    pub fn neg(&mut self, x: Expr) -> Result<Expr> {
        self.scale(x, -1.0)
    }

    fn same_shape(&self, op: &'static str, a: Expr, b: Expr) -> Result<Vec<usize>> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: Expr, b: Expr) -> Result<Expr> {
        let s = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: Expr, b: Expr) -> Result<Expr> {
        let s = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), s))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Expr, b: Expr) -> Result<Expr> {
        let s = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    pub fn matmul(&mut self, a: Expr, b: Expr) -> Result<Expr> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) * op(b)` where `ta`/`tb` select a transposed operand.
    pub fn matmul_t(&mut self, a: Expr, b: Expr, ta: bool, tb: bool) -> Result<Expr> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?} (need 2-D)")));
        }
        let (n, k1) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, p) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k1 != k2 {
            return Err(shape_err(
                "matmul",
                format!("{sa:?}{} x {sb:?}{}", if ta { "^T" } else { "" }, if tb { "^T" } else { "" }),
            ));
        }
        Ok(self.push(Op::MatMul { a, b, ta, tb }, vec![n, p]))
    }

    /// 2-D cross-correlation of `x: [B, Cin, H, W]` with `k: [Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Expr, k: Expr, stride: usize, pad: usize) -> Result<Expr> {
        self.check(x)?;
        self.check(k)?;
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be positive".into()));
        }
        let geom = ConvGeom { stride, pad };
        let (sx, sk) = (self.shape(x), self.shape(k));
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] {
            return Err(shape_err("conv2d", format!("input {sx:?}, kernel {sk:?}")));
        }
        let ho = geom.out_len(sx[2], sk[2]);
        let wo = geom.out_len(sx[3], sk[3]);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(shape_err("conv2d", format!("kernel {sk:?} larger than padded input {sx:?}")));
        };
        let shape = vec![sx[0], sk[0], ho, wo];
        Ok(self.push(Op::Conv2d { x, k, geom }, shape))
    }

    pub(crate) fn conv_back_input(
        &mut self,
        dy: Expr,
        k: Expr,
        geom: ConvGeom,
        in_hw: (usize, usize),
    ) -> Result<Expr> {
        let (sd, sk) = (self.shape(dy).to_vec(), self.shape(k).to_vec());
        if sd.len() != 4 || sk.len() != 4 || sd[1] != sk[0] {
            return Err(shape_err("conv_back_input", format!("dy {sd:?}, kernel {sk:?}")));
        }
        let shape = vec![sd[0], sk[1], in_hw.0, in_hw.1];
        Ok(self.push(Op::ConvBackInput { dy, k, geom, in_hw }, shape))
    }

    pub(crate) fn conv_back_kernel(
        &mut self,
        x: Expr,
        dy: Expr,
        geom: ConvGeom,
        k_hw: (usize, usize),
    ) -> Result<Expr> {
        let (sx, sd) = (self.shape(x).to_vec(), self.shape(dy).to_vec());
        if sx.len() != 4 || sd.len() != 4 || sx[0] != sd[0] {
            return Err(shape_err("conv_back_kernel", format!("x {sx:?}, dy {sd:?}")));
        }
        let shape = vec![sd[1], sx[1], k_hw.0, k_hw.1];
        Ok(self.push(Op::ConvBackKernel { x, dy, geom, k_hw }, shape))
    }

    /// Nearest-neighbour 2x upsampling of a `[B, C, H, W]` tensor.
    pub fn upsample2x(&mut self, x: Expr) -> Result<Expr> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("upsample2x", format!("{s:?} (need 4-D)")));
        }
        Ok(self.push(Op::Upsample2x(x), vec![s[0], s[1], 2 * s[2], 2 * s[3]]))
    }

    pub(crate) fn sumpool2x(&mut self, x: Expr) -> Result<Expr> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(shape_err("sumpool2x", format!("{s:?}")));
        }
        Ok(self.push(Op::SumPool2x(x), vec![s[0], s[1], s[2] / 2, s[3] / 2]))
    }

    pub fn reshape(&mut self, x: Expr, shape: &[usize]) -> Result<Expr> {
        self.check(x)?;
        let from: usize = self.shape(x).iter().product();
        let to: usize = shape.iter().product();
        if from != to {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        if self.shape(x) == shape {
            return Ok(x);
        }
        Ok(self.push(Op::Reshape(x), shape.to_vec()))
    }

    /// Sum of all entries, a scalar.
    pub fn sum(&mut self, x: Expr) -> Result<Expr> {
        self.check(x)?;
        Ok(self.push(Op::Sum(x), Vec::new()))
    }

    pub fn mean(&mut self, x: Expr) -> Result<Expr> {
        self.check(x)?;
        let n = self.shape(x).iter().product::<usize>() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Repeats a scalar over `shape`.
    pub fn broadcast(&mut self, s: Expr, shape: &[usize]) -> Result<Expr> {
        self.check(s)?;
        if !self.shape(s).is_empty() {
            return Err(shape_err("broadcast", format!("source {:?} is not a scalar", self.shape(s))));
        }
        Ok(self.push(Op::Broadcast(s), shape.to_vec()))
    }

    /// Views `x` as `[outer, mid, inner]` and sums the outer and inner axes,
    /// leaving a `[mid]` vector.
    pub fn sum_keep(&mut self, x: Expr, outer: usize, mid: usize, inner: usize) -> Result<Expr> {
        self.check(x)?;
        let n: usize = self.shape(x).iter().product();
        if n != outer * mid * inner {
            return Err(shape_err(
                "sum_keep",
                format!("{:?} cannot be viewed as [{outer}, {mid}, {inner}]", self.shape(x)),
            ));
        }
        Ok(self.push(Op::SumKeep { x, outer, mid, inner }, vec![mid]))
    }

    /// Broadcasts a `[mid]` vector to `shape`, viewed as `[outer, mid, inner]`.
    pub fn expand(&mut self, v: Expr, outer: usize, mid: usize, inner: usize, shape: &[usize]) -> Result<Expr> {
        self.check(v)?;
        let n: usize = shape.iter().product();
        if self.shape(v) != [mid] || n != outer * mid * inner {
            return Err(shape_err(
                "expand",
                format!("{:?} -> {shape:?} as [{outer}, {mid}, {inner}]", self.shape(v)),
            ));
        }
        Ok(self.push(Op::Expand { v, outer, mid, inner }, shape.to_vec()))
    }

    /// Row-wise log-sum-exp of an `[n, p]` matrix, giving `[n]`.
    pub fn logsumexp_rows(&mut self, x: Expr) -> Result<Expr> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err("logsumexp_rows", format!("{s:?} (need 2-D)")));
        }
        Ok(self.push(Op::LogSumExpRows(x), vec![s[0]]))
    }

    pub fn softmax_rows(&mut self, x: Expr) -> Result<Expr> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err("softmax_rows", format!("{s:?} (need 2-D)")));
        }
        Ok(self.push(Op::SoftmaxRows(x), s))
    }

    /// Inner product of two equally shaped tensors.
    pub fn dot(&mut self, a: Expr, b: Expr) -> Result<Expr> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// Euclidean norm over all entries.
    pub fn norm(&mut self, x: Expr) -> Result<Expr> {
        let sq = self.square(x)?;
        let s = self.sum(sq)?;
        self.sqrt(s)
    }

    /// Multiplies every entry of `x` by the scalar expression `s`.
    pub fn mul_scalar(&mut self, s: Expr, x: Expr) -> Result<Expr> {
        let shape = self.shape(x).to_vec();
        let b = self.broadcast(s, &shape)?;
        self.mul(b, x)
    }

    /// Divides every entry of `x` by the (positive) scalar expression `s`.
    pub fn div_scalar(&mut self, x: Expr, s: Expr) -> Result<Expr> {
        let r = self.recip(s)?;
        self.mul_scalar(r, x)
    }

    /// Population variance over all entries.
    pub fn variance(&mut self, x: Expr) -> Result<Expr> {
        let shape = self.shape(x).to_vec();
        let m = self.mean(x)?;
        let mb = self.broadcast(m, &shape)?;
        let c = self.sub(x, mb)?;
        let sq = self.square(c)?;
        self.mean(sq)
    }

    /// Sum of several equally shaped expressions.
    pub fn add_all(&mut self, terms: &[Expr]) -> Result<Expr> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| shape_err("add_all", "no terms".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_rejects_mismatched_shapes_with_op_name() {
        let mut g = Graph::new();
        let a = g.leaf("a", &[2]);
        let b = g.leaf("b", &[3]);
        match g.add(a, b) {
            Err(GraphError::Shape { op, .. }) => assert_eq!(op, "add"),
            other => panic!("expected shape error, got {other:?}"),
        }
        let m = g.leaf("m", &[2, 3]);
        let n = g.leaf("n", &[2, 3]);
        assert!(g.matmul(m, n).is_err());
        assert!(g.matmul_t(m, n, false, true).is_ok());
    }

    #[test]
    fn foreign_handles_are_rejected() {
        let mut g = Graph::new();
        let a = g.leaf("a", &[1]);
        assert!(g.add(a, Expr(99)).is_err());
    }
}
