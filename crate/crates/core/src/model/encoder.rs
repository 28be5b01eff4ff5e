//! Two-block self-attention encoder over the fused sequence.
//!
//! The sequence is `[pool, t_1..t_M, v_1..v_N]` plus the latent row when
//! present. The pooling token's output row is the pooled representation. The
//! MLP uses `x * sigmoid(x)` so every op on the classification path stays
//! smooth, which the path-integral attribution checks rely on.

use super::{BoundParams, ModelState};
use crate::autodiff::{Graph, NodeId};
use crate::error::CoreResult;

/// Linear projection of raw image features into the model dimension.
pub fn project_image(g: &mut Graph, params: &BoundParams, image: NodeId) -> CoreResult<NodeId> {
    let p = g.matmul(image, params.id_of("image_proj_w"))?;
    Ok(g.add_bias(p, params.id_of("image_proj_b"))?)
}

fn attention_block(
    g: &mut Graph,
    model: &ModelState,
    params: &BoundParams,
    block: usize,
    x: NodeId,
) -> CoreResult<NodeId> {
    let d = model.config.embed_dim;
    let heads = model.config.heads;
    let hd = d / heads;

    let q = g.matmul(x, params.id_of(&format!("block{block}.wq")))?;
    let k = g.matmul(x, params.id_of(&format!("block{block}.wk")))?;
    let v = g.matmul(x, params.id_of(&format!("block{block}.wv")))?;

    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * hd, hd)?;
        let kh = g.slice_cols(k, h * hd, hd)?;
        let vh = g.slice_cols(v, h * hd, hd)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, 1.0 / (hd as f64).sqrt())?;
        let attn = g.softmax_rows(scaled)?;
        head_outputs.push(g.matmul(attn, vh)?);
    }
    let merged = g.concat_cols(head_outputs)?;
    let projected = g.matmul(merged, params.id_of(&format!("block{block}.wo")))?;
    let x = g.add(x, projected)?;

    let h1 = g.matmul(x, params.id_of(&format!("block{block}.w1")))?;
    let h1 = g.add_bias(h1, params.id_of(&format!("block{block}.b1")))?;
    let h1 = g.silu(h1)?;
    let h2 = g.matmul(h1, params.id_of(&format!("block{block}.w2")))?;
    let h2 = g.add_bias(h2, params.id_of(&format!("block{block}.b2")))?;
    Ok(g.add(x, h2)?)
}

/// Encode the fused sequence and return the pooled vector.
pub fn encode(
    g: &mut Graph,
    model: &ModelState,
    params: &BoundParams,
    text: NodeId,
    image_projected: NodeId,
    latent: Option<NodeId>,
) -> CoreResult<NodeId> {
    let mut parts = vec![params.id_of("pool_token"), text, image_projected];
    if let Some(l) = latent {
        parts.push(l);
    }
    let mut x = g.concat_rows(parts)?;
    for b in 0..model.config.blocks {
        x = attention_block(g, model, params, b, x)?;
    }
    Ok(g.row(x, 0)?)
}

/// Classifier head: logits and class probabilities.
pub fn classify(
    g: &mut Graph,
    params: &BoundParams,
    pooled: NodeId,
) -> CoreResult<(NodeId, NodeId)> {
    let wx = g.matmul(params.id_of("classifier_w"), pooled)?;
    let logits = g.add(wx, params.id_of("classifier_b"))?;
    let probs = g.softmax(logits)?;
    Ok((logits, probs))
}
