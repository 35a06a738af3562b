//! Forward evaluation of graph nodes.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{GraphError, Result};
use crate::graph::{Expr, Graph, Op};
use crate::kernels;
use crate::tensor::Tensor;

/// Values bound to leaves for one evaluation.
#[derive(Clone, Debug, Default)]
pub struct Bindings<'a> {
    values: HashMap<usize, &'a Tensor>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, leaf: Expr, value: &'a Tensor) -> &mut Self {
        self.values.insert(leaf.index(), value);
        self
    }

    pub fn with(mut self, leaf: Expr, value: &'a Tensor) -> Self {
        self.bind(leaf, value);
        self
    }

    /// Binds leaves and values pairwise.
    pub fn bind_all(&mut self, leaves: &[Expr], values: &'a [Tensor]) -> &mut Self {
        for (l, v) in leaves.iter().zip(values) {
            self.bind(*l, v);
        }
        self
    }

    fn get(&self, leaf: usize) -> Option<&'a Tensor> {
        self.values.get(&leaf).copied()
    }
}

/// The ordered set of nodes needed to compute a list of roots.
///
/// Building a plan is linear in the graph size; reuse it when the same roots
/// are evaluated repeatedly.
#[derive(Clone, Debug)]
pub struct Plan {
    roots: Vec<Expr>,
    order: Vec<usize>,
}

impl Plan {
    pub fn roots(&self) -> &[Expr] {
        &self.roots
    }

    /// Evaluates the plan's roots under `bindings`.
    pub fn run(&self, graph: &Graph, bindings: &Bindings<'_>) -> Result<Vec<Tensor>> {
        let mut values: Vec<Option<Cow<'_, Tensor>>> = vec![None; graph.len()];
        for &i in &self.order {
            let v = eval_node(graph, i, &values, bindings)?;
            values[i] = Some(v);
        }
        Ok(self
            .roots
            .iter()
            .map(|r| values[r.index()].as_ref().expect("planned").clone().into_owned())
            .collect())
    }
}

impl Graph {
    pub fn plan(&self, roots: &[Expr]) -> Result<Plan> {
        let mut needed = vec![false; self.len()];
        let mut stack = Vec::new();
        for r in roots {
            if r.index() >= self.len() {
                return Err(GraphError::ForeignExpr(r.index()));
            }
            stack.push(r.index());
        }
        while let Some(i) = stack.pop() {
            if needed[i] {
                continue;
            }
            needed[i] = true;
            stack.extend(self.nodes[i].op.operands().iter().map(|e| e.index()));
        }
        let order = (0..self.len()).filter(|&i| needed[i]).collect();
        Ok(Plan { roots: roots.to_vec(), order })
    }

    /// Evaluates a single expression.
    pub fn eval(&self, root: Expr, bindings: &Bindings<'_>) -> Result<Tensor> {
        Ok(self.eval_many(&[root], bindings)?.pop().expect("one root"))
    }

    /// Evaluates several expressions sharing intermediate results.
    pub fn eval_many(&self, roots: &[Expr], bindings: &Bindings<'_>) -> Result<Vec<Tensor>> {
        self.plan(roots)?.run(self, bindings)
    }
}

fn eval_node<'g>(
    graph: &'g Graph,
    i: usize,
    values: &[Option<Cow<'g, Tensor>>],
    bindings: &Bindings<'g>,
) -> Result<Cow<'g, Tensor>> {
    let node = &graph.nodes[i];
    let val = |e: Expr| -> &Tensor { values[e.index()].as_ref().expect("operand evaluated") };
    let out = match &node.op {
        Op::Leaf { name } => {
            let t = bindings.get(i).ok_or_else(|| GraphError::Unbound {
                leaf: i,
                name: name.clone(),
            })?;
            if t.shape() != node.shape.as_slice() {
                return Err(GraphError::BindingShape {
                    leaf: i,
                    got: t.shape().to_vec(),
                    expected: node.shape.clone(),
                });
            }
            return Ok(Cow::Borrowed(t));
        }
        Op::Const(t) => return Ok(Cow::Borrowed(t)),
        Op::Unary(f, x) => val(*x).map(|u| f.apply(u)),
        Op::Add(a, b) => val(*a).zip_map(val(*b), |x, y| x + y)?,
        Op::Sub(a, b) => val(*a).zip_map(val(*b), |x, y| x - y)?,
        Op::Mul(a, b) => val(*a).zip_map(val(*b), |x, y| x * y)?,
        Op::MatMul { a, b, ta, tb } => kernels::matmul(val(*a), val(*b), *ta, *tb),
        Op::Conv2d { x, k, geom } => kernels::conv2d(val(*x), val(*k), *geom),
        Op::ConvBackInput { dy, k, geom, in_hw } => {
            kernels::conv_back_input(val(*dy), val(*k), *geom, *in_hw)
        }
        Op::ConvBackKernel { x, dy, geom, k_hw } => {
            kernels::conv_back_kernel(val(*x), val(*dy), *geom, *k_hw)
        }
        Op::Upsample2x(x) => kernels::upsample2x(val(*x)),
        Op::SumPool2x(x) => kernels::sumpool2x(val(*x)),
        Op::Reshape(x) => Tensor::from_raw(node.shape.clone(), val(*x).data().to_vec()),
        Op::Sum(x) => Tensor::scalar(val(*x).sum()),
        Op::Broadcast(s) => Tensor::filled(&node.shape, val(*s).item()),
        Op::SumKeep { x, outer, mid, inner } => kernels::sum_keep(val(*x), *outer, *mid, *inner),
        Op::Expand { v, outer, mid, inner } => {
            kernels::expand(val(*v), *outer, *mid, *inner, &node.shape)
        }
        Op::LogSumExpRows(x) => kernels::logsumexp_rows(val(*x)),
        Op::SoftmaxRows(x) => kernels::softmax_rows(val(*x)),
    };
    Ok(Cow::Owned(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let mut g = Graph::new();
        let a = g.leaf("a", &[2]);
        let b = g.leaf("b", &[2]);
        let s = g.add(a, b).unwrap();
        let (ta, tb) = (v(&[1., 2.]), v(&[3., 4.]));
        let out = g.eval(s, &Bindings::new().with(a, &ta).with(b, &tb)).unwrap();
        assert_eq!(out.data(), &[4., 6.]);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let eye = g.constant(Tensor::eye(3));
        let x = g.leaf("v", &[3, 1]);
        let y = g.matmul(eye, x).unwrap();
        let t = Tensor::new(vec![3, 1], vec![1., 2., 3.]).unwrap();
        assert_eq!(g.eval(y, &Bindings::new().with(x, &t)).unwrap().data(), &[1., 2., 3.]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[1]);
        let s = g.sigmoid(x).unwrap();
        let t = v(&[0.0]);
        assert_eq!(g.eval(s, &Bindings::new().with(x, &t)).unwrap().data(), &[0.5]);
    }

    #[test]
    fn unbound_and_misshapen_leaves_are_errors() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[2]);
        let s = g.sum(x).unwrap();
        assert!(matches!(g.eval(s, &Bindings::new()), Err(GraphError::Unbound { .. })));
        let t = v(&[1.0, 2.0, 3.0]);
        assert!(matches!(
            g.eval(s, &Bindings::new().with(x, &t)),
            Err(GraphError::BindingShape { .. })
        ));
    }

    #[test]
    fn repeated_evaluation_is_bit_identical() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[4]);
        let e = g.elu(x).unwrap();
        let sq = g.square(e).unwrap();
        let s = g.sum(sq).unwrap();
        let t = v(&[-1.3, 0.2, 2.5, -0.01]);
        let b = Bindings::new().with(x, &t);
        let first = g.eval(s, &b).unwrap();
        for _ in 0..5 {
            assert_eq!(g.eval(s, &b).unwrap().item().to_bits(), first.item().to_bits());
        }
    }
}
