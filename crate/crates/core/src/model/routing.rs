//! Dynamic concept weights via token-concept agreement, and the latent.
//!
//! For concept `i`, every token embedding is passed through the concept's
//! transform, agreement logits are the dot products with the concept vector,
//! and a softmax across concepts (per token) turns them into routing
//! coefficients. The coefficient-weighted mean of transformed tokens is
//! squashed so its length lands in `[0, 1)`; that length is the dynamic
//! weight. The latent is the weighted sum of concept embeddings, and masking
//! a concept removes exactly its term.

use super::{BoundParams, ModelState};
use crate::autodiff::{Graph, NodeId};
use crate::error::{CoreError, CoreResult};
use crate::tensor::Tensor;

/// Squash a vector: keeps direction, maps length `r` to `r^2 / (1 + r^2)`.
pub fn squash(s: &[f64]) -> Vec<f64> {
    let norm_sq: f64 = s.iter().map(|v| v * v).sum();
    if norm_sq == 0.0 {
        return vec![0.0; s.len()];
    }
    let factor = norm_sq / (1.0 + norm_sq) / norm_sq.sqrt();
    s.iter().map(|v| v * factor).collect()
}

/// Length of the squashed vector, computed smoothly as `q / (1 + q)` with
/// `q = |s|^2`; identical to `|squash(s)|` and well-defined at zero.
pub fn squash_norm(s: &[f64]) -> f64 {
    let q: f64 = s.iter().map(|v| v * v).sum();
    q / (1.0 + q)
}

/// Intermediate routing nodes, exposed for tests.
pub struct RoutingNodes {
    /// `[tokens, concepts]` routing coefficients; each row sums to 1.
    pub coefficients: NodeId,
    /// Dynamic weight per concept, each a scalar node in `[0, 1)`.
    pub weights: Vec<NodeId>,
}

/// Build the dynamic-weight subgraph for all concepts.
pub fn dynamic_weights_detailed(
    g: &mut Graph,
    model: &ModelState,
    params: &BoundParams,
    concepts: NodeId,
    text: NodeId,
) -> CoreResult<RoutingNodes> {
    let n = model.config.n_concepts;
    let tokens = g.value(text).rows();
    if tokens == 0 {
        return Err(CoreError::EmptyInput("token sequence"));
    }

    // Transformed tokens and per-token agreement logits for each concept.
    let mut transformed = Vec::with_capacity(n);
    let mut logits = Vec::with_capacity(n);
    for i in 0..n {
        let w = params.id_of(&format!("routing.{i}"));
        let t_i = g.matmul(text, w)?;
        let c_i = g.row(concepts, i)?;
        logits.push(g.matmul(t_i, c_i)?);
        transformed.push(t_i);
    }
    // Normalize across concepts, separately for each token.
    let logit_matrix = g.concat_cols(logits)?;
    let coefficients = g.softmax_rows(logit_matrix)?;

    let mut weights = Vec::with_capacity(n);
    for (i, t_i) in transformed.iter().enumerate() {
        let b_i = g.col(coefficients, i)?;
        let t_i_t = g.transpose(*t_i)?;
        let summed = g.matmul(t_i_t, b_i)?;
        let s_i = g.scale(summed, 1.0 / tokens as f64)?;
        // |squash(s)| = q / (1 + q) with q = |s|^2; smooth at s = 0.
        let q = g.dot(s_i, s_i)?;
        let denom = g.add_const(q, 1.0)?;
        weights.push(g.div(q, denom)?);
    }
    Ok(RoutingNodes {
        coefficients,
        weights,
    })
}

/// Dynamic weight per concept; see [`dynamic_weights_detailed`].
pub fn dynamic_weights(
    g: &mut Graph,
    model: &ModelState,
    params: &BoundParams,
    concepts: NodeId,
    text: NodeId,
) -> CoreResult<Vec<NodeId>> {
    Ok(dynamic_weights_detailed(g, model, params, concepts, text)?.weights)
}

/// `[n]` vector of static weights: sigmoid of the learned logits.
pub fn static_weights(g: &mut Graph, params: &BoundParams) -> CoreResult<NodeId> {
    Ok(g.sigmoid(params.id_of("static_logits"))?)
}

/// Weighted sum of unmasked concept embeddings. A fully masked latent is the
/// zero vector, not an error.
pub fn latent(
    g: &mut Graph,
    model: &ModelState,
    concepts: NodeId,
    dynamic: &[NodeId],
    statics: NodeId,
    mask: &[bool],
) -> CoreResult<NodeId> {
    let mut acc: Option<NodeId> = None;
    for (i, &keep) in mask.iter().enumerate() {
        if !keep {
            continue;
        }
        let ws = g.index(statics, i)?;
        let w = g.add(dynamic[i], ws)?;
        let c_i = g.row(concepts, i)?;
        let term = g.mul_scalar(c_i, w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => Ok(g.input(Tensor::zeros(&[model.config.embed_dim]))?),
    }
}

/// Value-level latent with explicit weights; matches the graph arithmetic
/// term for term so bank construction and traces agree bitwise.
pub fn latent_values(
    concept_matrix: &Tensor,
    dynamic: &[f64],
    statics: &[f64],
    mask: &[bool],
) -> Vec<f64> {
    let d = concept_matrix.cols();
    let mut acc = vec![0.0; d];
    for (i, &keep) in mask.iter().enumerate() {
        if !keep {
            continue;
        }
        let w = dynamic[i] + statics[i];
        for (a, c) in acc.iter_mut().zip(concept_matrix.row_slice(i)) {
            *a += w * c;
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{bind_params, ModelConfig, ModelState};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn squash_zero_is_zero() {
        assert_eq!(squash(&[0.0, 0.0, 0.0]), vec![0.0, 0.0, 0.0]);
        assert_eq!(squash_norm(&[0.0, 0.0]), 0.0);
    }

    #[test]
    fn squash_unit_length_is_half() {
        let v = squash(&[1.0, 0.0]);
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 0.5).abs() < 1e-15);
        assert_eq!(squash_norm(&[0.0, 1.0]), 0.5);
    }

    #[test]
    fn squash_length_ten_is_hundred_over_hundred_one() {
        let norm = squash_norm(&[10.0, 0.0, 0.0]);
        assert!((norm - 100.0 / 101.0).abs() < 1e-15);
    }

    #[test]
    fn squash_bounded_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut prev = -1.0;
        for scale in [0.01, 0.1, 0.5, 1.0, 2.0, 10.0, 100.0] {
            let s: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm_in: f64 = s.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scaled: Vec<f64> = s.iter().map(|v| v * scale / norm_in).collect();
            let out = squash_norm(&scaled);
            assert!((0.0..1.0).contains(&out));
            assert!(out > prev, "monotone in input length");
            prev = out;
        }
    }

    #[test]
    fn coefficients_sum_to_one_per_token() {
        let cfg = ModelConfig {
            heads: 2,
            ..ModelConfig::new(6, 40, 3)
        };
        let model = ModelState::init(cfg, 5).unwrap();
        let mut g = Graph::new();
        let params = bind_params(&mut g, &model).unwrap();
        let c = g
            .input(Tensor::matrix(3, 6, (0..18).map(|i| (i as f64) * 0.1).collect()).unwrap())
            .unwrap();
        let t = g.gather_rows(params.id_of("token_embed"), vec![0, 3, 9, 2]).unwrap();
        let nodes = dynamic_weights_detailed(&mut g, &model, &params, c, t).unwrap();
        let coef = g.value(nodes.coefficients);
        for row in 0..coef.rows() {
            let s: f64 = coef.row_slice(row).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        for w in &nodes.weights {
            let v = g.value(*w).item();
            assert!((0.0..1.0).contains(&v));
        }
    }

    #[test]
    fn all_masked_latent_is_zero_vector() {
        let cfg = ModelConfig {
            heads: 2,
            ..ModelConfig::new(6, 40, 3)
        };
        let model = ModelState::init(cfg, 5).unwrap();
        let mut g = Graph::new();
        let params = bind_params(&mut g, &model).unwrap();
        let c = g.input(Tensor::zeros(&[3, 6])).unwrap();
        let zero = g.input(Tensor::scalar(0.0)).unwrap();
        let statics = static_weights(&mut g, &params).unwrap();
        let l = latent(&mut g, &model, c, &[zero, zero, zero], statics, &[false; 3]).unwrap();
        assert_eq!(g.value(l).data(), &[0.0; 6]);
    }

    #[test]
    fn single_concept_unit_weight_is_the_embedding() {
        // One unmasked concept with w_d + w_s = 1 reproduces c_0.
        let cfg = ModelConfig {
            heads: 2,
            ..ModelConfig::new(4, 40, 2)
        };
        let mut model = ModelState::init(cfg, 5).unwrap();
        // sigmoid(0) = 0.5 for both statics.
        model.static_logits = Tensor::vector(vec![0.0, 0.0]);
        let mut g = Graph::new();
        let params = bind_params(&mut g, &model).unwrap();
        let c = g
            .input(Tensor::matrix(2, 4, vec![1.0, 2.0, 3.0, 4.0, 9.0, 9.0, 9.0, 9.0]).unwrap())
            .unwrap();
        let half = g.input(Tensor::scalar(0.5)).unwrap();
        let zero = g.input(Tensor::scalar(0.0)).unwrap();
        let statics = static_weights(&mut g, &params).unwrap();
        let l = latent(&mut g, &model, c, &[half, zero], statics, &[true, false]).unwrap();
        assert_eq!(g.value(l).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn two_orthogonal_halves_norm() {
        // Two orthogonal unit concepts at weight 0.5 each: |L| = 0.5 * sqrt(2).
        let m = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = latent_values(&m, &[0.25, 0.25], &[0.25, 0.25], &[true, true]);
        let norm: f64 = l.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 0.5 * 2.0_f64.sqrt()).abs() < 1e-15);
    }
}
