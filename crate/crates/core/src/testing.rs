//! Seeded random-graph machinery shared by the gradient-correctness checks.
//!
//! Graph structure is a pure function of the seed: every RNG draw happens
//! whether or not an op is applicable, and value-dependent hazards (log,
//! sqrt, div) are wrapped in compositions that keep their domains safe for
//! any leaf values. That lets the same structure be re-evaluated with
//! perturbed leaves for central finite differences.

use crate::autodiff::{Graph, NodeId};
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// A reproducible random graph: leaves, their values, and a scalar root.
pub struct RandomGraph {
    pub graph: Graph,
    pub leaves: Vec<NodeId>,
    pub root: NodeId,
}

/// Build the seed's graph, optionally overriding leaf values (same shapes).
pub fn random_graph(seed: u64, overrides: Option<&[Tensor]>) -> RandomGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();

    let shapes: [Vec<usize>; 4] = [vec![4], vec![3, 4], vec![4, 3], vec![3]];
    let mut leaves = Vec::new();
    for (i, shape) in shapes.iter().enumerate() {
        let len: usize = shape.iter().product();
        let default: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let value = match overrides {
            Some(vals) => vals[i].clone(),
            None => Tensor::new(shape.clone(), default).unwrap(),
        };
        leaves.push(g.input(value).unwrap());
    }

    // Pool of intermediate nodes to draw operands from.
    let mut pool: Vec<NodeId> = leaves.clone();
    let ops = 12;
    for _ in 0..ops {
        let choice = rng.gen_range(0..14u32);
        let pick = |rng: &mut ChaCha8Rng, pool: &[NodeId]| pool[rng.gen_range(0..pool.len())];
        let a = pick(&mut rng, &pool);
        let b = pick(&mut rng, &pool);
        let produced = match choice {
            0 => same_shape(&mut g, a, b, |g, a, b| g.add(a, b)),
            1 => same_shape(&mut g, a, b, |g, a, b| g.sub(a, b)),
            2 => same_shape(&mut g, a, b, |g, a, b| g.mul(a, b)),
            3 => {
                // Safe elementwise division: denominator sigmoid(b) + 0.5.
                if g.value(a).shape() == g.value(b).shape() {
                    let s = g.sigmoid(b).unwrap();
                    let denom = g.add_const(s, 0.5).unwrap();
                    Some(g.div(a, denom).unwrap())
                } else {
                    None
                }
            }
            4 => matmul_compatible(&mut g, &pool, &mut rng),
            5 => Some(g.relu(a).unwrap()),
            6 => Some(g.sigmoid(a).unwrap()),
            7 => {
                // Safe log: log(sigmoid(a) + 0.1).
                let s = g.sigmoid(a).unwrap();
                let shifted = g.add_const(s, 0.1).unwrap();
                Some(g.log(shifted).unwrap())
            }
            8 => {
                // Safe sqrt: sqrt(a*a + 0.01).
                let sq = g.mul(a, a).unwrap();
                let shifted = g.add_const(sq, 0.01).unwrap();
                Some(g.sqrt(shifted).unwrap())
            }
            9 => {
                if g.value(a).rank() == 1 {
                    Some(g.softmax(a).unwrap())
                } else {
                    Some(g.softmax_rows(a).unwrap())
                }
            }
            10 => Some(g.scale(a, rng.gen_range(-2.0..2.0)).unwrap()),
            11 => {
                let s = g.mean(b).unwrap();
                Some(g.mul_scalar(a, s).unwrap())
            }
            12 => {
                if g.value(a).rank() == 2 {
                    Some(g.transpose(a).unwrap())
                } else {
                    Some(g.relu(a).unwrap())
                }
            }
            _ => {
                if g.value(a).rank() == 1 {
                    Some(g.gradient_reversal(a, 1.0).unwrap())
                } else {
                    let n = g.l2norm(a).unwrap();
                    Some(g.add_const(n, 1.0).unwrap())
                }
            }
        };
        if let Some(id) = produced {
            pool.push(id);
        }
    }

    // Scalar root: mean of the last node plus the l2 norm of another,
    // then squashed through a sigmoid for a bounded output.
    let last = *pool.last().unwrap();
    let other = pool[rng.gen_range(0..pool.len())];
    let m = g.mean(last).unwrap();
    let n = g.l2norm(other).unwrap();
    let s = g.add(m, n).unwrap();
    let root = g.sigmoid(s).unwrap();
    RandomGraph {
        graph: g,
        leaves,
        root,
    }
}

fn same_shape(
    g: &mut Graph,
    a: NodeId,
    b: NodeId,
    f: impl Fn(&mut Graph, NodeId, NodeId) -> Result<NodeId, crate::error::AutodiffError>,
) -> Option<NodeId> {
    if g.value(a).shape() == g.value(b).shape() {
        Some(f(g, a, b).unwrap())
    } else {
        None
    }
}

fn matmul_compatible(g: &mut Graph, pool: &[NodeId], rng: &mut ChaCha8Rng) -> Option<NodeId> {
    // Draw a fixed number of candidate pairs so the RNG stream is stable.
    for _ in 0..4 {
        let a = pool[rng.gen_range(0..pool.len())];
        let b = pool[rng.gen_range(0..pool.len())];
        let sa = g.value(a).shape().to_vec();
        let sb = g.value(b).shape().to_vec();
        let ok = match (sa.as_slice(), sb.as_slice()) {
            ([_, k], [k2, _]) => k == k2,
            ([_, k], [k2]) => k == k2,
            _ => false,
        };
        if ok {
            return Some(g.matmul(a, b).unwrap());
        }
    }
    None
}

/// Max relative error between reverse-mode gradients and central finite
/// differences (h = 1e-5) over every leaf entry of the seed's graph.
pub fn gradcheck_max_rel_error(seed: u64) -> f64 {
    let built = random_graph(seed, None);
    let leaf_values: Vec<Tensor> = built
        .leaves
        .iter()
        .map(|l| built.graph.value(*l).clone())
        .collect();
    let grads = built.graph.backward(built.root).unwrap();

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (li, leaf) in built.leaves.iter().enumerate() {
        let analytic = grads.get(&built.graph, *leaf);
        for entry in 0..leaf_values[li].len() {
            let mut plus = leaf_values.clone();
            plus[li].data_mut()[entry] += h;
            let mut minus = leaf_values.clone();
            minus[li].data_mut()[entry] -= h;
            let f_plus = eval_root(seed, &plus);
            let f_minus = eval_root(seed, &minus);
            let fd = (f_plus - f_minus) / (2.0 * h);
            let ad = analytic.data()[entry];
            let denom = fd.abs().max(ad.abs()).max(1e-4);
            worst = worst.max((ad - fd).abs() / denom);
        }
    }
    worst
}

fn eval_root(seed: u64, leaf_values: &[Tensor]) -> f64 {
    let built = random_graph(seed, Some(leaf_values));
    built.graph.value(built.root).item()
}
