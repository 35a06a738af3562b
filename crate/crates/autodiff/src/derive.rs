//! Symbolic reverse-mode differentiation.
//!
//! `derive` appends the adjoint computation to the same graph using only
//! differentiable ops, so its outputs can be differentiated again. This is
//! what makes costs built from parameter gradients (gradient matching)
//! optimizable with respect to the inputs that produced those gradients.

use std::collections::HashMap;

use crate::error::{GraphError, Result};
use crate::graph::{Expr, Graph, Op, Unary};
use crate::tensor::Tensor;

impl Graph {
    /// Returns expressions for `d root / d w` for each leaf `w` in `wrt`.
    ///
    /// Targets the root does not depend on get a constant zero gradient.
    pub fn derive(&mut self, root: Expr, wrt: &[Expr]) -> Result<Vec<Expr>> {
        if root.index() >= self.len() {
            return Err(GraphError::ForeignExpr(root.index()));
        }
        if !self.shape(root).is_empty() {
            return Err(GraphError::NonScalarRoot(self.shape(root).to_vec()));
        }
        for &w in wrt {
            if !self.is_leaf(w) {
                return Err(GraphError::NotALeaf(w.index()));
            }
        }

        let n = root.index() + 1;
        // Nodes whose value depends on some target.
        let mut depends = vec![false; n];
        for &w in wrt {
            if w.index() < n {
                depends[w.index()] = true;
            }
        }
        for i in 0..n {
            if !depends[i] && self.nodes[i].op.operands().iter().any(|o| depends[o.index()]) {
                depends[i] = true;
            }
        }
        // Nodes the root depends on.
        let mut reaches = vec![false; n];
        reaches[root.index()] = true;
        for i in (0..n).rev() {
            if reaches[i] {
                for o in self.nodes[i].op.operands() {
                    reaches[o.index()] = true;
                }
            }
        }

        let mut contribs: HashMap<usize, Vec<Expr>> = HashMap::new();
        if depends[root.index()] {
            let one = self.scalar(1.0);
            contribs.insert(root.index(), vec![one]);
        }
        let mut adjoints: HashMap<usize, Expr> = HashMap::new();
        for i in (0..n).rev() {
            if !(depends[i] && reaches[i]) {
                continue;
            }
            let Some(parts) = contribs.remove(&i) else {
                continue;
            };
            let adj = self.add_all(&parts)?;
            adjoints.insert(i, adj);
            let op = self.nodes[i].op.clone();
            for (k, operand) in op.operands().into_iter().enumerate() {
                if !depends[operand.index()] {
                    continue;
                }
                if let Some(c) = self.vjp(&op, Expr(i), k, adj)? {
                    contribs.entry(operand.index()).or_default().push(c);
                }
            }
        }

        wrt.iter()
            .map(|&w| match adjoints.get(&w.index()) {
                Some(&a) => Ok(a),
                None => {
                    let shape = self.shape(w).to_vec();
                    Ok(self.constant(Tensor::zeros(&shape)))
                }
            })
            .collect()
    }

    /// Contribution of output adjoint `adj` to operand `k` of node `out`.
    fn vjp(&mut self, op: &Op, out: Expr, k: usize, adj: Expr) -> Result<Option<Expr>> {
        let e = match *op {
            Op::Leaf { .. } | Op::Const(_) => return Ok(None),
            Op::Unary(f, x) => {
                let d = match f {
                    Unary::Affine { scale, .. } => return self.scale(adj, scale).map(Some),
                    Unary::Sigmoid => {
                        let one_minus = self.affine(out, -1.0, 1.0)?;
                        self.mul(out, one_minus)?
                    }
                    Unary::Elu => self.unary(Unary::EluD1, x)?,
                    Unary::EluD1 | Unary::EluD2 => self.unary(Unary::EluD2, x)?,
                    Unary::Exp => out,
                    Unary::Log => self.recip(x)?,
                    Unary::Pow { coef, exp } => {
                        if exp == 0.0 || coef == 0.0 {
                            return Ok(None);
                        }
                        self.unary(Unary::Pow { coef: coef * exp, exp: exp - 1.0 }, x)?
                    }
                };
                self.mul(adj, d)?
            }
            Op::Add(..) => adj,
            Op::Sub(..) => {
                if k == 0 {
                    adj
                } else {
                    self.neg(adj)?
                }
            }
            Op::Mul(a, b) => {
                let other = if k == 0 { b } else { a };
                self.mul(adj, other)?
            }
            Op::MatMul { a, b, ta, tb } => {
                if k == 0 {
                    if ta {
                        self.matmul_t(b, adj, tb, true)?
                    } else {
                        self.matmul_t(adj, b, false, !tb)?
                    }
                } else if tb {
                    self.matmul_t(adj, a, true, ta)?
                } else {
                    self.matmul_t(a, adj, !ta, false)?
                }
            }
            Op::Conv2d { x, k: kern, geom } => {
                if k == 0 {
                    let s = self.shape(x);
                    let in_hw = (s[2], s[3]);
                    self.conv_back_input(adj, kern, geom, in_hw)?
                } else {
                    let s = self.shape(kern);
                    let k_hw = (s[2], s[3]);
                    self.conv_back_kernel(x, adj, geom, k_hw)?
                }
            }
            Op::ConvBackInput { dy, k: kern, geom, .. } => {
                if k == 0 {
                    self.conv2d_geom(adj, kern, geom)?
                } else {
                    let s = self.shape(kern);
                    let k_hw = (s[2], s[3]);
                    self.conv_back_kernel(adj, dy, geom, k_hw)?
                }
            }
            Op::ConvBackKernel { x, dy, geom, .. } => {
                if k == 0 {
                    let s = self.shape(x);
                    let in_hw = (s[2], s[3]);
                    self.conv_back_input(dy, adj, geom, in_hw)?
                } else {
                    self.conv2d_geom(x, adj, geom)?
                }
            }
            Op::Upsample2x(_) => self.sumpool2x(adj)?,
            Op::SumPool2x(_) => self.upsample2x(adj)?,
            Op::Reshape(x) => {
                let s = self.shape(x).to_vec();
                self.reshape(adj, &s)?
            }
            Op::Sum(x) => {
                let s = self.shape(x).to_vec();
                self.broadcast(adj, &s)?
            }
            Op::Broadcast(_) => self.sum(adj)?,
            Op::SumKeep { x, outer, mid, inner } => {
                let s = self.shape(x).to_vec();
                self.expand(adj, outer, mid, inner, &s)?
            }
            Op::Expand { outer, mid, inner, .. } => self.sum_keep(adj, outer, mid, inner)?,
            Op::LogSumExpRows(x) => {
                let s = self.shape(x).to_vec();
                let a = self.expand(adj, 1, s[0], s[1], &s)?;
                let p = self.softmax_rows(x)?;
                self.mul(a, p)?
            }
            Op::SoftmaxRows(_) => {
                let s = self.shape(out).to_vec();
                let sa = self.mul(out, adj)?;
                let rows = self.sum_keep(sa, 1, s[0], s[1])?;
                let rows = self.expand(rows, 1, s[0], s[1], &s)?;
                let centered = self.sub(adj, rows)?;
                self.mul(out, centered)?
            }
        };
        Ok(Some(e))
    }

    fn conv2d_geom(&mut self, x: Expr, k: Expr, geom: crate::kernels::ConvGeom) -> Result<Expr> {
        self.conv2d(x, k, geom.stride, geom.pad)
    }
}
