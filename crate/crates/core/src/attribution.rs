//! Gradient attribution baselines over the three input matrices.
//!
//! Every method attributes a scalar target (by default the predicted-class
//! probability) to the concept matrix, the text embeddings, and the image
//! features jointly. Concept rankings use the concept-matrix scores only;
//! text and image totals are reported alongside. Methods are pure given
//! (target, inputs, config, seed), so sweeps parallelize over samples.

use crate::autodiff::deeplift;
use crate::autodiff::quadrature::{gauss_legendre_unit, midpoint_unit};
use crate::autodiff::{Graph, NodeId};
use crate::concepts::ConceptVocabulary;
use crate::error::{CoreError, CoreResult};
use crate::model::routing::latent_values;
use crate::model::{bind_params, build_trace, encoder, forward_classify, ModelState, TextInput};
use crate::ranking::{RankSource, RankedConceptSet};
use crate::synthdata::MemeSample;
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// The three attributed inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct AttrInputs {
    /// `[n, d]` concept matrix.
    pub concept: Tensor,
    /// `[M, d]` text embeddings.
    pub text: Tensor,
    /// `[N, d]` image features.
    pub image: Tensor,
}

impl AttrInputs {
    pub fn zeros_like(&self) -> AttrInputs {
        AttrInputs {
            concept: Tensor::zeros(self.concept.shape()),
            text: Tensor::zeros(self.text.shape()),
            image: Tensor::zeros(self.image.shape()),
        }
    }

    fn interpolate(&self, baseline: &AttrInputs, alpha: f64) -> AttrInputs {
        let lerp = |x: &Tensor, b: &Tensor| {
            let mut out = b.clone();
            for i in 0..out.len() {
                out.data_mut()[i] += alpha * (x.data()[i] - b.data()[i]);
            }
            out
        };
        AttrInputs {
            concept: lerp(&self.concept, &baseline.concept),
            text: lerp(&self.text, &baseline.text),
            image: lerp(&self.image, &baseline.image),
        }
    }

    fn gaussian_like(&self, std: f64, rng: &mut ChaCha8Rng) -> AttrInputs {
        let draw = |shape: &[usize], rng: &mut ChaCha8Rng| {
            let len: usize = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..len)
                    .map(|_| {
                        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                        let u2: f64 = rng.gen();
                        std * (-2.0 * u1.ln()).sqrt()
                            * (2.0 * std::f64::consts::PI * u2).cos()
                    })
                    .collect(),
            )
            .expect("shape/data agree")
        };
        AttrInputs {
            concept: draw(self.concept.shape(), rng),
            text: draw(self.text.shape(), rng),
            image: draw(self.image.shape(), rng),
        }
    }
}

/// Leaf ids of the bound inputs inside a target graph.
pub struct BoundInputs {
    pub concept: NodeId,
    pub text: NodeId,
    pub image: NodeId,
}

/// Anything that turns the three inputs into a scalar graph output.
pub trait AttributionTarget: Sync {
    fn build(&self, g: &mut Graph, inputs: &AttrInputs) -> CoreResult<(NodeId, BoundInputs)>;
}

/// Probability of a fixed class under the model, as a function of the three
/// input matrices with parameters frozen.
pub struct ModelProbabilityTarget<'a> {
    pub model: &'a ModelState,
    pub mask: Vec<bool>,
    pub target_class: usize,
}

impl AttributionTarget for ModelProbabilityTarget<'_> {
    fn build(&self, g: &mut Graph, inputs: &AttrInputs) -> CoreResult<(NodeId, BoundInputs)> {
        let params = bind_params(g, self.model)?;
        let nodes = build_trace(
            g,
            self.model,
            &params,
            inputs.concept.clone(),
            TextInput::Matrix(inputs.text.clone()),
            inputs.image.clone(),
            &self.mask,
            false,
        )?;
        let p = g.index(nodes.probs, self.target_class)?;
        Ok((
            p,
            BoundInputs {
                concept: nodes.concepts,
                text: nodes.text,
                image: nodes.image,
            },
        ))
    }
}

/// Where baselines come from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum BaselinePolicy {
    Zero,
    Gaussian { count: usize, std: f64 },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub enum PathQuadrature {
    GaussLegendre,
    Midpoint,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AttributionConfig {
    pub baseline: BaselinePolicy,
    /// Path steps for integrated gradients.
    pub ig_steps: usize,
    pub quadrature: PathQuadrature,
    /// Sampled (baseline, interpolation) pairs for the SHAP variants.
    pub shap_samples: usize,
    /// Aggregate per concept with absolute values instead of signed sums.
    pub abs_aggregation: bool,
    pub seed: u64,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            baseline: BaselinePolicy::Zero,
            ig_steps: 128,
            quadrature: PathQuadrature::GaussLegendre,
            shap_samples: 16,
            abs_aggregation: false,
            seed: 42,
        }
    }
}

impl AttributionConfig {
    pub fn validate(&self) -> CoreResult<()> {
        if self.ig_steps < 8 {
            return Err(CoreError::InvalidConfig("ig_steps must be >= 8".into()));
        }
        if self.shap_samples < 2 {
            return Err(CoreError::InvalidConfig(
                "shap_samples must be >= 2".into(),
            ));
        }
        if let BaselinePolicy::Gaussian { count, .. } = self.baseline {
            if count == 0 {
                return Err(CoreError::InvalidConfig(
                    "gaussian baseline count must be >= 1".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Completeness bookkeeping for path and reference methods.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CompletenessCheck {
    /// Sum of attributions over every entry of every input.
    pub attribution_sum: f64,
    /// `F(x) - F(baseline)`, averaged over baselines.
    pub delta_f: f64,
}

/// Per-concept scores plus the text/image totals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptScores {
    pub source: RankSource,
    pub concept: Vec<f64>,
    pub text_total: f64,
    pub image_total: f64,
    pub completeness: Option<CompletenessCheck>,
}

impl ConceptScores {
    pub fn ranking(&self) -> RankedConceptSet {
        RankedConceptSet::from_scores(self.source, &self.concept)
    }
}

fn forward_value<T: AttributionTarget>(target: &T, x: &AttrInputs) -> CoreResult<f64> {
    let mut g = Graph::new();
    let (out, _) = target.build(&mut g, x)?;
    Ok(g.value(out).item())
}

fn gradients<T: AttributionTarget>(target: &T, x: &AttrInputs) -> CoreResult<(f64, AttrInputs)> {
    let mut g = Graph::new();
    let (out, bound) = target.build(&mut g, x)?;
    let grads = g.backward(out)?;
    Ok((
        g.value(out).item(),
        AttrInputs {
            concept: grads.get(&g, bound.concept),
            text: grads.get(&g, bound.text),
            image: grads.get(&g, bound.image),
        },
    ))
}

fn aggregate(source: RankSource, attr: &AttrInputs, abs: bool) -> ConceptScores {
    let reduce = |t: &Tensor, row: usize| -> f64 {
        t.row_slice(row)
            .iter()
            .map(|v| if abs { v.abs() } else { *v })
            .sum()
    };
    let total = |t: &Tensor| -> f64 {
        t.data().iter().map(|v| if abs { v.abs() } else { *v }).sum()
    };
    ConceptScores {
        source,
        concept: (0..attr.concept.rows())
            .map(|i| reduce(&attr.concept, i))
            .collect(),
        text_total: total(&attr.text),
        image_total: total(&attr.image),
        completeness: None,
    }
}

fn elementwise_product(a: &AttrInputs, b: &AttrInputs) -> AttrInputs {
    let mul = |x: &Tensor, y: &Tensor| {
        let mut out = x.clone();
        for i in 0..out.len() {
            out.data_mut()[i] *= y.data()[i];
        }
        out
    };
    AttrInputs {
        concept: mul(&a.concept, &b.concept),
        text: mul(&a.text, &b.text),
        image: mul(&a.image, &b.image),
    }
}

fn difference(a: &AttrInputs, b: &AttrInputs) -> AttrInputs {
    let sub = |x: &Tensor, y: &Tensor| {
        let mut out = x.clone();
        out.add_scaled(y, -1.0);
        out
    };
    AttrInputs {
        concept: sub(&a.concept, &b.concept),
        text: sub(&a.text, &b.text),
        image: sub(&a.image, &b.image),
    }
}

fn accumulate(acc: &mut AttrInputs, x: &AttrInputs, w: f64) {
    acc.concept.add_scaled(&x.concept, w);
    acc.text.add_scaled(&x.text, w);
    acc.image.add_scaled(&x.image, w);
}

fn attr_sum(a: &AttrInputs) -> f64 {
    a.concept.data().iter().sum::<f64>()
        + a.text.data().iter().sum::<f64>()
        + a.image.data().iter().sum::<f64>()
}

fn baselines_for(x: &AttrInputs, policy: &BaselinePolicy, seed: u64) -> Vec<AttrInputs> {
    match policy {
        BaselinePolicy::Zero => vec![x.zeros_like()],
        BaselinePolicy::Gaussian { count, std } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..*count).map(|_| x.gaussian_like(*std, &mut rng)).collect()
        }
    }
}

/// Sum of absolute output gradients per concept row.
pub fn saliency<T: AttributionTarget>(target: &T, x: &AttrInputs) -> CoreResult<ConceptScores> {
    let (_, grads) = gradients(target, x)?;
    Ok(aggregate(RankSource::Saliency, &grads, true))
}

/// Elementwise input times gradient, summed per concept row.
pub fn input_x_gradient<T: AttributionTarget>(
    target: &T,
    x: &AttrInputs,
    cfg: &AttributionConfig,
) -> CoreResult<ConceptScores> {
    let (_, grads) = gradients(target, x)?;
    let attr = elementwise_product(x, &grads);
    Ok(aggregate(RankSource::InputXGradient, &attr, cfg.abs_aggregation))
}

/// Path integral of gradients from baseline to input.
pub fn integrated_gradients<T: AttributionTarget>(
    target: &T,
    x: &AttrInputs,
    cfg: &AttributionConfig,
    seed: u64,
) -> CoreResult<ConceptScores> {
    cfg.validate()?;
    let (nodes, weights) = match cfg.quadrature {
        PathQuadrature::GaussLegendre => gauss_legendre_unit(cfg.ig_steps),
        PathQuadrature::Midpoint => midpoint_unit(cfg.ig_steps),
    };
    let baselines = baselines_for(x, &cfg.baseline, seed);
    let fx = forward_value(target, x)?;

    let mut mean_attr = x.zeros_like();
    let mut mean_delta = 0.0;
    for b in &baselines {
        let mut avg_grad = x.zeros_like();
        for (alpha, w) in nodes.iter().zip(weights.iter()) {
            let point = x.interpolate(b, *alpha);
            let (_, g) = gradients(target, &point)?;
            accumulate(&mut avg_grad, &g, *w);
        }
        let attr = elementwise_product(&difference(x, b), &avg_grad);
        accumulate(&mut mean_attr, &attr, 1.0 / baselines.len() as f64);
        mean_delta += (fx - forward_value(target, b)?) / baselines.len() as f64;
    }

    let mut scores = aggregate(
        RankSource::IntegratedGradients,
        &mean_attr,
        cfg.abs_aggregation,
    );
    scores.completeness = Some(CompletenessCheck {
        attribution_sum: attr_sum(&mean_attr),
        delta_f: mean_delta,
    });
    Ok(scores)
}

/// Mean over sampled (baseline, interpolation point) pairs of
/// `(x - baseline) * gradient`.
pub fn gradient_shap<T: AttributionTarget>(
    target: &T,
    x: &AttrInputs,
    cfg: &AttributionConfig,
    seed: u64,
) -> CoreResult<ConceptScores> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mean_attr = x.zeros_like();
    for _ in 0..cfg.shap_samples {
        let baseline = match &cfg.baseline {
            BaselinePolicy::Zero => x.zeros_like(),
            BaselinePolicy::Gaussian { std, .. } => x.gaussian_like(*std, &mut rng),
        };
        let alpha: f64 = rng.gen();
        let point = x.interpolate(&baseline, alpha);
        let (_, g) = gradients(target, &point)?;
        let attr = elementwise_product(&difference(x, &baseline), &g);
        accumulate(&mut mean_attr, &attr, 1.0 / cfg.shap_samples as f64);
    }
    Ok(aggregate(
        RankSource::GradientShap,
        &mean_attr,
        cfg.abs_aggregation,
    ))
}

fn deeplift_once<T: AttributionTarget>(
    target: &T,
    x: &AttrInputs,
    reference: &AttrInputs,
) -> CoreResult<(AttrInputs, f64)> {
    let mut g = Graph::new();
    let (out, bound) = target.build(&mut g, x)?;
    g.reference_forward(&[
        (bound.concept, reference.concept.clone()),
        (bound.text, reference.text.clone()),
        (bound.image, reference.image.clone()),
    ])?;
    let mult = deeplift::multipliers(&g, out)?;
    let attr = AttrInputs {
        concept: mult.attribution(&g, bound.concept)?,
        text: mult.attribution(&g, bound.text)?,
        image: mult.attribution(&g, bound.image)?,
    };
    let delta = g.value(out).item() - g.ref_value(out)?.item();
    Ok((attr, delta))
}

/// Rescale-rule multipliers times input deltas against the configured
/// reference.
pub fn deeplift<T: AttributionTarget>(
    target: &T,
    x: &AttrInputs,
    cfg: &AttributionConfig,
    seed: u64,
) -> CoreResult<ConceptScores> {
    let reference = baselines_for(x, &cfg.baseline, seed)
        .into_iter()
        .next()
        .expect("at least one baseline");
    let (attr, delta) = deeplift_once(target, x, &reference)?;
    let mut scores = aggregate(RankSource::DeepLift, &attr, cfg.abs_aggregation);
    scores.completeness = Some(CompletenessCheck {
        attribution_sum: attr_sum(&attr),
        delta_f: delta,
    });
    Ok(scores)
}

/// DeepLIFT averaged over sampled references.
pub fn deeplift_shap<T: AttributionTarget>(
    target: &T,
    x: &AttrInputs,
    cfg: &AttributionConfig,
    seed: u64,
) -> CoreResult<ConceptScores> {
    let references = baselines_for(x, &cfg.baseline, seed);
    let mut mean_attr = x.zeros_like();
    let mut mean_delta = 0.0;
    for r in &references {
        let (attr, delta) = deeplift_once(target, x, r)?;
        accumulate(&mut mean_attr, &attr, 1.0 / references.len() as f64);
        mean_delta += delta / references.len() as f64;
    }
    let mut scores = aggregate(RankSource::DeepLiftShap, &mean_attr, cfg.abs_aggregation);
    scores.completeness = Some(CompletenessCheck {
        attribution_sum: attr_sum(&mean_attr),
        delta_f: mean_delta,
    });
    Ok(scores)
}

/// The attributed inputs of one sample under a model and vocabulary.
pub fn sample_inputs(
    model: &ModelState,
    vocab: &ConceptVocabulary,
    sample: &MemeSample,
) -> CoreResult<AttrInputs> {
    for &t in &sample.text_tokens {
        if t >= model.config.token_table {
            return Err(CoreError::TokenOutOfRange {
                token: t,
                size: model.config.token_table,
            });
        }
    }
    let rows: Vec<Vec<f64>> = sample
        .text_tokens
        .iter()
        .map(|&t| model.token_embed.row_slice(t).to_vec())
        .collect();
    Ok(AttrInputs {
        concept: vocab.matrix(),
        text: Tensor::from_rows(&rows).map_err(CoreError::Autodiff)?,
        image: sample.image_matrix(),
    })
}

/// Run one method on one sample. The target class is the model's prediction
/// on the un-intervened trace; stochastic methods derive their stream from
/// `(cfg.seed, sample.id)` so sweeps are order-independent.
pub fn attribute_sample(
    model: &ModelState,
    vocab: &ConceptVocabulary,
    sample: &MemeSample,
    method: RankSource,
    cfg: &AttributionConfig,
) -> CoreResult<ConceptScores> {
    let mask = vec![true; model.config.n_concepts];
    let base = forward_classify(model, vocab, sample, &mask)?;
    let target = ModelProbabilityTarget {
        model,
        mask,
        target_class: base.predicted,
    };
    let x = sample_inputs(model, vocab, sample)?;
    let seed = crate::derive_seed(cfg.seed, sample.id);
    match method {
        RankSource::Saliency => saliency(&target, &x),
        RankSource::InputXGradient => input_x_gradient(&target, &x, cfg),
        RankSource::IntegratedGradients => integrated_gradients(&target, &x, cfg, seed),
        RankSource::GradientShap => gradient_shap(&target, &x, cfg, seed),
        RankSource::DeepLift => deeplift(&target, &x, cfg, seed),
        RankSource::DeepLiftShap => deeplift_shap(&target, &x, cfg, seed),
        RankSource::Causal => Err(CoreError::InvalidConfig(
            "causal ranking is not an attribution method".into(),
        )),
    }
}

/// Per-concept separate path attribution with a zero baseline, holding all
/// other inputs and the routing weights fixed: concept `i`'s latent term is
/// scaled from zero to its full value and the target probability is
/// integrated along that path. By completeness the attribution equals the
/// probability change of the matching intervention.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquivalenceRecord {
    pub concept: usize,
    /// Path-integrated attribution of the concept's latent term (signed).
    pub attribution: f64,
    /// `F(full latent) - F(latent without the concept)` (signed).
    pub delta_f: f64,
}

struct LatentTermTarget<'a> {
    model: &'a ModelState,
    tokens: &'a [usize],
    image: Tensor,
    latent_base: Vec<f64>,
    target_class: usize,
}

impl LatentTermTarget<'_> {
    /// The target as a function of the term vector added onto the base
    /// latent; returns the output and the term leaf.
    fn build_term(&self, g: &mut Graph, term: &Tensor) -> CoreResult<(NodeId, NodeId)> {
        let params = bind_params(g, self.model)?;
        let term_leaf = g.input(term.clone())?;
        let base = g.input(Tensor::vector(self.latent_base.clone()))?;
        let latent = g.add(base, term_leaf)?;
        let text = g.gather_rows(params.id_of("token_embed"), self.tokens.to_vec())?;
        let image = g.input(self.image.clone())?;
        let vp = encoder::project_image(g, &params, image)?;
        let pooled = encoder::encode(g, self.model, &params, text, vp, Some(latent))?;
        let (_, probs) = encoder::classify(g, &params, pooled)?;
        let p = g.index(probs, self.target_class)?;
        Ok((p, term_leaf))
    }

    fn value(&self, term: &Tensor) -> CoreResult<f64> {
        let mut g = Graph::new();
        let (p, _) = self.build_term(&mut g, term)?;
        Ok(g.value(p).item())
    }

    fn gradient(&self, term: &Tensor) -> CoreResult<Tensor> {
        let mut g = Graph::new();
        let (p, leaf) = self.build_term(&mut g, term)?;
        let grads = g.backward(p)?;
        Ok(grads.get(&g, leaf))
    }
}

/// Evaluate the completeness-based equivalence for every concept of one
/// sample with Gauss-Legendre integration.
pub fn per_concept_path_attribution(
    model: &ModelState,
    vocab: &ConceptVocabulary,
    sample: &MemeSample,
    steps: usize,
) -> CoreResult<Vec<EquivalenceRecord>> {
    let n = model.config.n_concepts;
    let mask = vec![true; n];
    let base = forward_classify(model, vocab, sample, &mask)?;
    let concept_matrix = vocab.matrix();
    let (nodes, weights) = gauss_legendre_unit(steps);

    let mut records = Vec::with_capacity(n);
    for concept in 0..n {
        let mut without = mask.clone();
        without[concept] = false;
        let latent_base = latent_values(
            &concept_matrix,
            &base.dynamic_weights,
            &base.static_weights,
            &without,
        );
        let w = base.dynamic_weights[concept] + base.static_weights[concept];
        let term =
            Tensor::vector(vocab.embedding(concept).iter().map(|c| w * c).collect());
        let target = LatentTermTarget {
            model,
            tokens: &sample.text_tokens,
            image: sample.image_matrix(),
            latent_base,
            target_class: base.predicted,
        };

        let mut avg_grad = Tensor::zeros(term.shape());
        for (alpha, wq) in nodes.iter().zip(weights.iter()) {
            let point = term.scaled(*alpha);
            avg_grad.add_scaled(&target.gradient(&point)?, *wq);
        }
        let attribution = term.dot(&avg_grad);
        let delta_f = target.value(&term)? - target.value(&Tensor::zeros(term.shape()))?;
        records.push(EquivalenceRecord {
            concept,
            attribution,
            delta_f,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `F = sum(wc * C) + sum(wt * t) + sum(wv * v)`: a fixed linear form.
    struct LinearTarget {
        wc: Tensor,
        wt: Tensor,
        wv: Tensor,
    }

    impl LinearTarget {
        fn new(n: usize, d: usize, m: usize, k: usize) -> Self {
            let fill = |rows: usize, cols: usize, scale: f64| {
                Tensor::new(
                    vec![rows, cols],
                    (0..rows * cols)
                        .map(|i| ((i % 7) as f64 * 0.13 + 0.05) * scale)
                        .collect(),
                )
                .unwrap()
            };
            LinearTarget {
                wc: fill(n, d, 1.0),
                wt: fill(m, d, 0.4),
                wv: fill(k, d, 0.7),
            }
        }
    }

    impl AttributionTarget for LinearTarget {
        fn build(&self, g: &mut Graph, inputs: &AttrInputs) -> CoreResult<(NodeId, BoundInputs)> {
            let c = g.input(inputs.concept.clone())?;
            let t = g.input(inputs.text.clone())?;
            let v = g.input(inputs.image.clone())?;
            let wc = g.input(self.wc.clone())?;
            let wt = g.input(self.wt.clone())?;
            let wv = g.input(self.wv.clone())?;
            let pc = g.mul(c, wc)?;
            let pt = g.mul(t, wt)?;
            let pv = g.mul(v, wv)?;
            let sc = g.sum(pc)?;
            let st = g.sum(pt)?;
            let sv = g.sum(pv)?;
            let s1 = g.add(sc, st)?;
            let out = g.add(s1, sv)?;
            Ok((
                out,
                BoundInputs {
                    concept: c,
                    text: t,
                    image: v,
                },
            ))
        }
    }

    fn inputs(n: usize, d: usize, m: usize, k: usize) -> AttrInputs {
        let fill = |rows: usize, cols: usize, scale: f64| {
            Tensor::new(
                vec![rows, cols],
                (0..rows * cols)
                    .map(|i| ((i % 5) as f64 * 0.21 + 0.1) * scale)
                    .collect(),
            )
            .unwrap()
        };
        AttrInputs {
            concept: fill(n, d, 1.0),
            text: fill(m, d, 0.6),
            image: fill(k, d, 0.9),
        }
    }

    #[test]
    fn saliency_on_linear_model_is_abs_weight_sum() {
        let target = LinearTarget::new(3, 4, 2, 2);
        let x = inputs(3, 4, 2, 2);
        let scores = saliency(&target, &x).unwrap();
        for (i, s) in scores.concept.iter().enumerate() {
            let want: f64 = target.wc.row_slice(i).iter().map(|v| v.abs()).sum();
            assert!((s - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_concept_row_scores_zero_for_input_x_gradient() {
        let target = LinearTarget::new(3, 4, 2, 2);
        let mut x = inputs(3, 4, 2, 2);
        for j in 0..4 {
            x.concept.data_mut()[4 + j] = 0.0; // zero row 1
        }
        let scores = input_x_gradient(&target, &x, &AttributionConfig::default()).unwrap();
        assert_eq!(scores.concept[1], 0.0);
    }

    #[test]
    fn linear_model_collapses_ig_ixg_deeplift_gradshap() {
        // Positive weights and inputs: IG and DeepLIFT are exact on a linear
        // model and GradientSHAP's gradient is constant, so all four agree.
        let target = LinearTarget::new(4, 3, 2, 2);
        let x = inputs(4, 3, 2, 2);
        let cfg = AttributionConfig {
            ig_steps: 8,
            shap_samples: 4,
            ..AttributionConfig::default()
        };
        let ixg = input_x_gradient(&target, &x, &cfg).unwrap();
        let ig = integrated_gradients(&target, &x, &cfg, 1).unwrap();
        let dl = deeplift(&target, &x, &cfg, 1).unwrap();
        let gs = gradient_shap(&target, &x, &cfg, 1).unwrap();
        for i in 0..4 {
            assert!((ixg.concept[i] - ig.concept[i]).abs() < 1e-10);
            assert!((ixg.concept[i] - dl.concept[i]).abs() < 1e-10);
            assert!((ixg.concept[i] - gs.concept[i]).abs() < 1e-10);
        }
        // Euler identity for linear maps: scores sum to the output itself.
        let fx = forward_value(&target, &x).unwrap();
        let total = ig.concept.iter().sum::<f64>() + ig.text_total + ig.image_total;
        assert!((total - fx).abs() < 1e-10);
    }

    #[test]
    fn ig_at_baseline_is_zero() {
        let target = LinearTarget::new(3, 3, 2, 2);
        let x = AttrInputs {
            concept: Tensor::zeros(&[3, 3]),
            text: Tensor::zeros(&[2, 3]),
            image: Tensor::zeros(&[2, 3]),
        };
        let scores =
            integrated_gradients(&target, &x, &AttributionConfig::default(), 1).unwrap();
        assert!(scores.concept.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn gradient_shap_zero_spread_baseline_scores_zero() {
        // When every baseline equals the input, (x - b) = 0 and all scores
        // vanish regardless of the gradients.
        let target = LinearTarget::new(2, 3, 2, 2);
        let x = inputs(2, 3, 2, 2);
        let mut mean = x.zeros_like();
        for _ in 0..4 {
            let (_, g) = gradients(&target, &x).unwrap();
            let attr = elementwise_product(&difference(&x, &x), &g);
            accumulate(&mut mean, &attr, 0.25);
        }
        assert!(mean.concept.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_shap_is_seed_deterministic() {
        let target = LinearTarget::new(3, 4, 2, 2);
        let x = inputs(3, 4, 2, 2);
        let cfg = AttributionConfig {
            baseline: BaselinePolicy::Gaussian { count: 4, std: 0.5 },
            shap_samples: 8,
            ..AttributionConfig::default()
        };
        let a = gradient_shap(&target, &x, &cfg, 99).unwrap();
        let b = gradient_shap(&target, &x, &cfg, 99).unwrap();
        assert_eq!(a.concept, b.concept);
    }

    #[test]
    fn gradient_shap_matches_ig_within_five_percent_on_linear_model() {
        // The expectation over gaussian baselines has mean zero, so it
        // matches zero-baseline IG; 64 samples keep the error under 5%.
        let target = LinearTarget::new(3, 4, 2, 2);
        let x = inputs(3, 4, 2, 2);
        let ig_cfg = AttributionConfig {
            ig_steps: 16,
            ..AttributionConfig::default()
        };
        let ig = integrated_gradients(&target, &x, &ig_cfg, 7).unwrap();
        let gs_cfg = AttributionConfig {
            baseline: BaselinePolicy::Gaussian { count: 1, std: 0.3 },
            shap_samples: 64,
            ..AttributionConfig::default()
        };
        let gs = gradient_shap(&target, &x, &gs_cfg, 7).unwrap();
        for (a, b) in gs.concept.iter().zip(ig.concept.iter()) {
            assert!((a - b).abs() <= 0.05 * b.abs().max(1e-9), "{a} vs {b}");
        }
    }

    #[test]
    fn deeplift_at_reference_is_zero_and_shap_k1_matches() {
        let target = LinearTarget::new(3, 3, 2, 2);
        let x = inputs(3, 3, 2, 2);
        let cfg = AttributionConfig::default();
        let at_ref = AttrInputs {
            concept: Tensor::zeros(&[3, 3]),
            text: Tensor::zeros(&[2, 3]),
            image: Tensor::zeros(&[2, 3]),
        };
        let zero_scores = deeplift(&target, &at_ref, &cfg, 1).unwrap();
        assert!(zero_scores.concept.iter().all(|v| *v == 0.0));

        // deepliftshap with one zero baseline is bit-identical to deeplift
        // with the zero reference.
        let dl = deeplift(&target, &x, &cfg, 5).unwrap();
        let dls = deeplift_shap(&target, &x, &cfg, 5).unwrap();
        for (a, b) in dl.concept.iter().zip(dls.concept.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn config_bounds_are_enforced() {
        let bad_steps = AttributionConfig {
            ig_steps: 4,
            ..AttributionConfig::default()
        };
        assert!(bad_steps.validate().is_err());
        let bad_samples = AttributionConfig {
            shap_samples: 1,
            ..AttributionConfig::default()
        };
        assert!(bad_samples.validate().is_err());
    }
}
