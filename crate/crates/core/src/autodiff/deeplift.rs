//! Multiplier-based backward pass comparing activations to a reference.
//!
//! Multipliers generalize gradients: for every node, the contribution rule
//! satisfies sum(multiplier * delta_input) = delta_output, where delta is the
//! difference between the cached forward value and the cached reference
//! value. Chaining per-node rules preserves the identity, so attributions
//! sum to `F(x) - F(ref)` end to end.
//!
//! Rules per op family:
//! - linear ops propagate exactly (their Jacobian is the multiplier);
//! - bilinear ops (`mul`, `mul_scalar`, `dot`, `matmul`) use the symmetric
//!   split: the standard VJP evaluated at the midpoint between input and
//!   reference, which is exact for bilinear forms;
//! - scalar elementwise nonlinearities use the Rescale rule
//!   `delta_out / delta_in`, substituting the local derivative when
//!   `|delta_in| < 1e-12` so multipliers stay finite;
//! - vector-valued nonlinearities (`softmax`, `log_softmax`, `div`,
//!   `l2norm`), where a scalar rescale ratio is undefined, average the exact
//!   Jacobian along the straight path from reference to input with
//!   Gauss-Legendre quadrature, which keeps the summation identity to
//!   machine precision for these smooth ops.
//!
//! The gradient-reversal node is an identity here: multipliers track forward
//! behavior, and reversal only affects training gradients.

use super::ops::{eval, vjp, Op};
use super::quadrature::gauss_legendre_unit;
use super::{Graph, NodeId};
use crate::error::AutodiffError;
use crate::tensor::Tensor;

/// Rescale falls back to the local derivative below this delta.
pub const RESCALE_DELTA_EPS: f64 = 1e-12;

/// Quadrature points for path-averaged multipliers of vector nonlinearities.
const PATH_POINTS: usize = 24;

enum Rule {
    Linear,
    Bilinear,
    Rescale,
    PathAveraged,
}

fn rule_for(op: &Op) -> Rule {
    match op {
        Op::Mul | Op::MulScalar | Op::Dot | Op::MatMul => Rule::Bilinear,
        Op::Relu | Op::Sigmoid | Op::Sqrt | Op::Log => Rule::Rescale,
        Op::Softmax | Op::SoftmaxRows | Op::LogSoftmax | Op::Div | Op::L2Norm => {
            Rule::PathAveraged
        }
        _ => Rule::Linear,
    }
}

fn local_derivative(op: &Op, x: f64, y: f64) -> f64 {
    match op {
        Op::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Op::Sigmoid => y * (1.0 - y),
        Op::Sqrt => {
            if y == 0.0 {
                0.0
            } else {
                1.0 / (2.0 * y)
            }
        }
        Op::Log => 1.0 / x,
        _ => unreachable!("rescale rule only applies to scalar nonlinearities"),
    }
}

/// Per-node multipliers of a scalar root with respect to every node.
#[derive(Debug)]
pub struct Multipliers {
    mult: Vec<Option<Tensor>>,
}

impl Multipliers {
    pub fn get(&self, g: &Graph, id: NodeId) -> Tensor {
        self.mult[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(g.value(id).shape()))
    }

    /// `multiplier * (value - reference)`, elementwise.
    pub fn attribution(&self, g: &Graph, id: NodeId) -> Result<Tensor, AutodiffError> {
        let m = self.get(g, id);
        let x = g.value(id);
        let r = g.ref_value(id)?;
        let mut out = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            out.data_mut()[i] = m.data()[i] * (x.data()[i] - r.data()[i]);
        }
        Ok(out)
    }
}

/// Reverse multiplier pass from a scalar root. Requires a prior
/// [`Graph::reference_forward`].
pub fn multipliers(g: &Graph, root: NodeId) -> Result<Multipliers, AutodiffError> {
    let root_value = g.value(root);
    if root_value.len() != 1 {
        return Err(AutodiffError::NonScalarRoot {
            shape: root_value.shape().to_vec(),
        });
    }
    // Every node up to the root must carry a reference value.
    for id in 0..=root.0 {
        if g.node(NodeId(id)).ref_value.is_none() {
            return Err(AutodiffError::MissingReference);
        }
    }

    let mut mult: Vec<Option<Tensor>> = vec![None; g.len()];
    mult[root.0] = Some(Tensor::scalar(1.0));
    for id in (0..=root.0).rev() {
        let Some(upstream) = mult[id].take() else {
            continue;
        };
        let node = g.node(NodeId(id));
        if !node.parents.is_empty() {
            let contribs = node_multiplier_contribs(g, NodeId(id), &upstream)?;
            for (pid, c) in node.parents.iter().zip(contribs) {
                match &mut mult[pid.0] {
                    Some(acc) => acc.add_scaled(&c, 1.0),
                    slot => *slot = Some(c),
                }
            }
        }
        mult[id] = Some(upstream);
    }
    Ok(Multipliers { mult })
}

fn node_multiplier_contribs(
    g: &Graph,
    id: NodeId,
    upstream: &Tensor,
) -> Result<Vec<Tensor>, AutodiffError> {
    let node = g.node(id);
    let parent_vals: Vec<&Tensor> = node.parents.iter().map(|p| g.value(*p)).collect();
    let parent_refs: Vec<&Tensor> = node
        .parents
        .iter()
        .map(|p| g.node(*p).ref_value.as_ref().expect("checked above"))
        .collect();

    match rule_for(&node.op) {
        Rule::Linear => Ok(vjp(&node.op, &parent_vals, &node.value, upstream, true)),
        Rule::Bilinear => {
            let mids: Vec<Tensor> = parent_vals
                .iter()
                .zip(parent_refs.iter())
                .map(|(v, r)| {
                    let mut m = (*v).clone();
                    for i in 0..m.len() {
                        m.data_mut()[i] = 0.5 * (v.data()[i] + r.data()[i]);
                    }
                    m
                })
                .collect();
            let mid_refs: Vec<&Tensor> = mids.iter().collect();
            Ok(vjp(&node.op, &mid_refs, &node.value, upstream, true))
        }
        Rule::Rescale => {
            let x = parent_vals[0];
            let xr = parent_refs[0];
            let y = &node.value;
            let yr = g.node(id).ref_value.as_ref().expect("checked above");
            let mut out = Tensor::zeros(x.shape());
            for i in 0..x.len() {
                let dx = x.data()[i] - xr.data()[i];
                let m = if dx.abs() < RESCALE_DELTA_EPS {
                    local_derivative(&node.op, x.data()[i], y.data()[i])
                } else {
                    (y.data()[i] - yr.data()[i]) / dx
                };
                out.data_mut()[i] = upstream.data()[i] * m;
            }
            Ok(vec![out])
        }
        Rule::PathAveraged => {
            let (nodes_q, weights_q) = gauss_legendre_unit(PATH_POINTS);
            let mut acc: Vec<Tensor> = parent_vals
                .iter()
                .map(|v| Tensor::zeros(v.shape()))
                .collect();
            for (t, w) in nodes_q.iter().zip(weights_q.iter()) {
                let interp: Vec<Tensor> = parent_vals
                    .iter()
                    .zip(parent_refs.iter())
                    .map(|(v, r)| {
                        let mut m = (*v).clone();
                        for i in 0..m.len() {
                            m.data_mut()[i] =
                                r.data()[i] + t * (v.data()[i] - r.data()[i]);
                        }
                        m
                    })
                    .collect();
                let interp_refs: Vec<&Tensor> = interp.iter().collect();
                let y_q = eval(&node.op, &interp_refs)?;
                let contribs = vjp(&node.op, &interp_refs, &y_q, upstream, true);
                for (a, c) in acc.iter_mut().zip(contribs) {
                    a.add_scaled(&c, *w);
                }
            }
            Ok(acc)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Sum of leaf attributions must equal F(x) - F(ref).
    fn check_end_to_end(g: &mut Graph, root: NodeId, leaves: &[NodeId], tol: f64) {
        let m = multipliers(g, root).unwrap();
        let total: f64 = leaves
            .iter()
            .map(|l| m.attribution(g, *l).unwrap().data().iter().sum::<f64>())
            .sum();
        let delta = g.value(root).item() - g.ref_value(root).unwrap().item();
        assert!(
            (total - delta).abs() < tol,
            "sum {total} vs delta {delta}"
        );
    }

    #[test]
    fn linear_layer_multipliers_equal_weights() {
        // y = Wx: the multiplier of x for output j is row j of W, for any ref.
        let w_data = vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0];
        let mut g = Graph::new();
        let w = g
            .input(Tensor::matrix(2, 3, w_data.clone()).unwrap())
            .unwrap();
        let x = g.input(Tensor::vector(vec![0.7, -0.3, 2.0])).unwrap();
        let y = g.matmul(w, x).unwrap();
        let y0 = g.index(y, 0).unwrap();
        g.reference_forward(&[(x, Tensor::vector(vec![5.0, -4.0, 1.0]))])
            .unwrap();
        let m = multipliers(&g, y0).unwrap();
        let mx = m.get(&g, x);
        for (got, want) in mx.data().iter().zip(&w_data[0..3]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_rescale_matches_hand_computation() {
        // x=2, ref=-1: delta_out/delta_in = (2-0)/(2-(-1)) = 2/3.
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(2.0)).unwrap();
        let y = g.relu(x).unwrap();
        g.reference_forward(&[(x, Tensor::scalar(-1.0))]).unwrap();
        let m = multipliers(&g, y).unwrap();
        assert!((m.get(&g, x).item() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn input_equals_reference_gives_zero_attributions() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![0.4, -1.0, 2.2])).unwrap();
        let s = g.sigmoid(x).unwrap();
        let y = g.sum(s).unwrap();
        g.reference_forward(&[(x, Tensor::vector(vec![0.4, -1.0, 2.2]))])
            .unwrap();
        let m = multipliers(&g, y).unwrap();
        let attr = m.attribution(&g, x).unwrap();
        assert!(attr.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn grl_is_identity_for_multipliers() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(2.0)).unwrap();
        let r = g.gradient_reversal(x, 3.0).unwrap();
        let y = g.scale(r, 4.0).unwrap();
        g.reference_forward(&[(x, Tensor::scalar(0.0))]).unwrap();
        let m = multipliers(&g, y).unwrap();
        assert_eq!(m.get(&g, x).item(), 4.0);
    }

    #[test]
    fn summation_to_delta_through_softmax_and_products() {
        let mut g = Graph::new();
        let x = g
            .input(Tensor::vector(vec![0.5, -1.5, 2.0, 0.1]))
            .unwrap();
        let w = g
            .input(Tensor::matrix(4, 4, (0..16).map(|i| (i as f64) * 0.1 - 0.8).collect()).unwrap())
            .unwrap();
        let h = g.matmul(w, x).unwrap();
        let sm = g.softmax(h).unwrap();
        let prod = g.mul(sm, h).unwrap();
        let n = g.l2norm(prod).unwrap();
        let q = g.mul(n, n).unwrap();
        let denom = g.add_const(q, 1.0).unwrap();
        let y = g.div(q, denom).unwrap();
        let x_ref = Tensor::vector(vec![0.0, 0.3, -0.2, 1.0]);
        g.reference_forward(&[(x, x_ref)]).unwrap();
        check_end_to_end(&mut g, y, &[x, w], 1e-9);
    }

    #[test]
    fn bilinear_split_is_exact_for_products() {
        let mut g = Graph::new();
        let a = g.input(Tensor::vector(vec![1.5, -2.0])).unwrap();
        let b = g.input(Tensor::vector(vec![0.5, 3.0])).unwrap();
        let p = g.mul(a, b).unwrap();
        let y = g.sum(p).unwrap();
        g.reference_forward(&[
            (a, Tensor::vector(vec![-1.0, 0.2])),
            (b, Tensor::vector(vec![2.0, -0.7])),
        ])
        .unwrap();
        check_end_to_end(&mut g, y, &[a, b], 1e-12);
    }

    #[test]
    fn missing_reference_is_an_error() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(1.0)).unwrap();
        let y = g.sigmoid(x).unwrap();
        assert!(matches!(
            multipliers(&g, y),
            Err(AutodiffError::MissingReference)
        ));
    }
}
