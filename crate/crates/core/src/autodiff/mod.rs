//! Minimal reverse-mode automatic differentiation.
//!
//! Graphs are built eagerly: each builder call evaluates the op immediately,
//! checks shapes, and rejects non-finite intermediates. Node ids are assigned
//! in insertion order, which is a topological order by construction, so the
//! backward pass visits nodes exactly once in reverse insertion order and
//! results are deterministic.
//!
//! A graph instance is single-threaded. Independent graphs may run
//! concurrently over shared read-only parameters; nothing in here mutates
//! shared state.

pub mod deeplift;
pub mod ops;
pub mod quadrature;

use crate::error::AutodiffError;
use crate::tensor::Tensor;
use ops::{eval, vjp, Op};

pub use deeplift::Multipliers;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
pub struct GraphNode {
    pub op: Op,
    pub parents: Vec<NodeId>,
    /// Cached forward value.
    pub value: Tensor,
    /// Cached value from the most recent reference forward pass.
    pub ref_value: Option<Tensor>,
}

/// Reverse-mode computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<GraphNode>,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `id`; zero tensor if the node
    /// does not influence the root.
    pub fn get(&self, g: &Graph, id: NodeId) -> Tensor {
        self.grads[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(g.value(id).shape()))
    }

    pub fn get_opt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

type AdResult<T> = Result<T, AutodiffError>;

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn node(&self, id: NodeId) -> &GraphNode {
        &self.nodes[id.0]
    }

    /// Bind a leaf value.
    pub fn input(&mut self, value: Tensor) -> AdResult<NodeId> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: "input" });
        }
        self.nodes.push(GraphNode {
            op: Op::Input,
            parents: vec![],
            value,
            ref_value: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>) -> AdResult<NodeId> {
        let parent_vals: Vec<&Tensor> = parents.iter().map(|p| &self.nodes[p.0].value).collect();
        let value = eval(&op, &parent_vals)?;
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        self.nodes.push(GraphNode {
            op,
            parents,
            value,
            ref_value: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn gather_rows(&mut self, table: NodeId, indices: Vec<usize>) -> AdResult<NodeId> {
        self.push(Op::GatherRows { indices }, vec![table])
    }

    pub fn row(&mut self, m: NodeId, i: usize) -> AdResult<NodeId> {
        self.push(Op::Row(i), vec![m])
    }

    pub fn col(&mut self, m: NodeId, j: usize) -> AdResult<NodeId> {
        self.push(Op::Col(j), vec![m])
    }

    pub fn index(&mut self, v: NodeId, i: usize) -> AdResult<NodeId> {
        self.push(Op::Index(i), vec![v])
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> AdResult<NodeId> {
        self.push(Op::ConcatRows, parts)
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> AdResult<NodeId> {
        self.push(Op::ConcatCols, parts)
    }

    pub fn slice_cols(&mut self, m: NodeId, start: usize, len: usize) -> AdResult<NodeId> {
        self.push(Op::SliceCols { start, len }, vec![m])
    }

    pub fn transpose(&mut self, m: NodeId) -> AdResult<NodeId> {
        self.push(Op::Transpose, vec![m])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        self.push(Op::MatMul, vec![a, b])
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        self.push(Op::Dot, vec![a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        self.push(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        self.push(Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        self.push(Op::Div, vec![a, b])
    }

    pub fn mul_scalar(&mut self, t: NodeId, s: NodeId) -> AdResult<NodeId> {
        self.push(Op::MulScalar, vec![t, s])
    }

    pub fn scale(&mut self, t: NodeId, c: f64) -> AdResult<NodeId> {
        self.push(Op::Scale(c), vec![t])
    }

    pub fn add_const(&mut self, t: NodeId, c: f64) -> AdResult<NodeId> {
        self.push(Op::AddConst(c), vec![t])
    }

    pub fn add_bias(&mut self, m: NodeId, b: NodeId) -> AdResult<NodeId> {
        self.push(Op::AddBias, vec![m, b])
    }

    pub fn softmax(&mut self, v: NodeId) -> AdResult<NodeId> {
        self.push(Op::Softmax, vec![v])
    }

    pub fn softmax_rows(&mut self, m: NodeId) -> AdResult<NodeId> {
        self.push(Op::SoftmaxRows, vec![m])
    }

    pub fn log_softmax(&mut self, v: NodeId) -> AdResult<NodeId> {
        self.push(Op::LogSoftmax, vec![v])
    }

    pub fn relu(&mut self, t: NodeId) -> AdResult<NodeId> {
        self.push(Op::Relu, vec![t])
    }

    pub fn sigmoid(&mut self, t: NodeId) -> AdResult<NodeId> {
        self.push(Op::Sigmoid, vec![t])
    }

    pub fn sqrt(&mut self, t: NodeId) -> AdResult<NodeId> {
        self.push(Op::Sqrt, vec![t])
    }

    pub fn log(&mut self, t: NodeId) -> AdResult<NodeId> {
        self.push(Op::Log, vec![t])
    }

    pub fn mean(&mut self, t: NodeId) -> AdResult<NodeId> {
        self.push(Op::Mean, vec![t])
    }

    pub fn sum(&mut self, t: NodeId) -> AdResult<NodeId> {
        self.push(Op::Sum, vec![t])
    }

    pub fn l2norm(&mut self, t: NodeId) -> AdResult<NodeId> {
        self.push(Op::L2Norm, vec![t])
    }

    /// Gradient reversal: forward identity, backward multiplies by `-lambda`.
    pub fn gradient_reversal(&mut self, t: NodeId, lambda: f64) -> AdResult<NodeId> {
        self.push(Op::Grl(lambda), vec![t])
    }

    /// `x * sigmoid(x)`, composed so its derivative comes for free.
    pub fn silu(&mut self, t: NodeId) -> AdResult<NodeId> {
        let s = self.sigmoid(t)?;
        self.mul(t, s)
    }

    /// Reverse pass from a scalar root. Gradients accumulate for every node
    /// on a path to the root; untouched nodes report zero.
    pub fn backward(&self, root: NodeId) -> AdResult<Gradients> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(AutodiffError::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for id in (0..=root.0).rev() {
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.parents.is_empty() {
                let parent_vals: Vec<&Tensor> =
                    node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                let contribs = vjp(&node.op, &parent_vals, &node.value, &upstream, false);
                for (pid, c) in node.parents.iter().zip(contribs) {
                    match &mut grads[pid.0] {
                        Some(acc) => acc.add_scaled(&c, 1.0),
                        slot => *slot = Some(c),
                    }
                }
            }
            grads[id] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    /// Re-run the forward pass with some leaves overridden, caching the
    /// results as per-node reference values for the multiplier backward.
    pub fn reference_forward(&mut self, overrides: &[(NodeId, Tensor)]) -> AdResult<()> {
        for i in 0..self.nodes.len() {
            let rv = if self.nodes[i].parents.is_empty() {
                match overrides.iter().find(|(id, _)| id.0 == i) {
                    Some((_, t)) => {
                        if t.shape() != self.nodes[i].value.shape() {
                            return Err(AutodiffError::ShapeMismatch {
                                op: "reference_forward",
                                detail: format!(
                                    "override {:?} vs leaf {:?}",
                                    t.shape(),
                                    self.nodes[i].value.shape()
                                ),
                            });
                        }
                        t.clone()
                    }
                    None => self.nodes[i].value.clone(),
                }
            } else {
                let vals: Vec<&Tensor> = self.nodes[i]
                    .parents
                    .iter()
                    .map(|p| {
                        self.nodes[p.0]
                            .ref_value
                            .as_ref()
                            .expect("parents precede children")
                    })
                    .collect();
                let v = eval(&self.nodes[i].op, &vals)?;
                if !v.is_finite() {
                    return Err(AutodiffError::NonFinite {
                        op: self.nodes[i].op.name(),
                    });
                }
                v
            };
            self.nodes[i].ref_value = Some(rv);
        }
        Ok(())
    }

    pub fn ref_value(&self, id: NodeId) -> AdResult<&Tensor> {
        self.nodes[id.0]
            .ref_value
            .as_ref()
            .ok_or(AutodiffError::MissingReference)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_input(g: &mut Graph, v: f64) -> NodeId {
        g.input(Tensor::scalar(v)).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![0.0, 0.0, 0.0])).unwrap();
        let y = g.softmax(x).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut g = Graph::new();
        let eye = g
            .input(Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap())
            .unwrap();
        let x = g.input(Tensor::vector(vec![2.0, -1.0, 0.5])).unwrap();
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, -1.0, 0.5]);
    }

    #[test]
    fn mean_forced_by_definition() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let m = g.mean(x).unwrap();
        assert_eq!(g.value(m).item(), 2.0);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = scalar_input(&mut g, 3.0);
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(&g, x).item(), 6.0);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::new();
        let x = scalar_input(&mut g, 0.0);
        let y = g.sigmoid(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert!((grads.get(&g, x).item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let y = g.scale(x, 2.0).unwrap();
        assert!(matches!(
            g.backward(y),
            Err(AutodiffError::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn non_finite_intermediate_is_rejected() {
        let mut g = Graph::new();
        let x = scalar_input(&mut g, -1.0);
        assert!(matches!(g.log(x), Err(AutodiffError::NonFinite { .. })));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut g = Graph::new();
        let a = g.input(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = g.input(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        assert!(matches!(
            g.add(a, b),
            Err(AutodiffError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn grl_forward_is_identity_backward_flips_sign() {
        // f(x) = x^2 through a GRL: forward unchanged, gradient negated.
        for (lambda, expect) in [(1.0, -6.0), (0.5, -3.0)] {
            let mut g = Graph::new();
            let x = scalar_input(&mut g, 3.0);
            let r = g.gradient_reversal(x, lambda).unwrap();
            assert_eq!(g.value(r).item(), 3.0);
            let y = g.mul(r, r).unwrap();
            assert_eq!(g.value(y).item(), 9.0);
            let grads = g.backward(y).unwrap();
            // Through the GRL the incoming 2x = 6 is scaled by -lambda.
            assert!((grads.get(&g, x).item() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn grl_forward_values_bit_identical() {
        let mut plain = Graph::new();
        let x1 = plain.input(Tensor::vector(vec![0.3, -1.2, 4.5])).unwrap();
        let y1 = plain.sigmoid(x1).unwrap();

        let mut with_grl = Graph::new();
        let x2 = with_grl.input(Tensor::vector(vec![0.3, -1.2, 4.5])).unwrap();
        let r = with_grl.gradient_reversal(x2, 2.0).unwrap();
        let y2 = with_grl.sigmoid(r).unwrap();

        assert_eq!(plain.value(y1).data(), with_grl.value(y2).data());
    }

    #[test]
    fn gather_rows_accumulates_duplicate_indices() {
        let mut g = Graph::new();
        let table = g
            .input(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let rows = g.gather_rows(table, vec![0, 0, 1]).unwrap();
        let s = g.sum(rows).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(&g, table).data(), &[2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn reference_forward_overrides_leaves() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let y = g.sum(x).unwrap();
        g.reference_forward(&[(x, Tensor::vector(vec![0.0, 0.0]))])
            .unwrap();
        assert_eq!(g.ref_value(y).unwrap().item(), 0.0);
        assert_eq!(g.value(y).item(), 3.0);
    }
}
