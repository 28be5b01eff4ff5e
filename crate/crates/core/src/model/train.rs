//! Adversarial three-head training with plain Adam.
//!
//! Total loss per sample: cross-entropy of the main head, plus the
//! adversarial cross-entropies of the latent head and the latent-free pooled
//! head, each behind a gradient-reversal node and scaled by its weight.
//! Per-sample gradients within a batch are computed on independent graphs
//! over frozen parameters and reduced in sample order, so training results
//! do not depend on scheduling.

use super::{bind_params, build_trace, ModelState, TextInput};
use crate::autodiff::{Graph, NodeId};
use crate::concepts::ConceptVocabulary;
use crate::error::{CoreError, CoreResult};
use crate::par;
use crate::synthdata::MemeSample;
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 5e-5,
            seed: 42,
        }
    }
}

/// Mean loss per epoch, logged for the loss curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
}

/// Plain Adam, state aligned with [`ModelState::named_params`].
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(model: &ModelState, lr: f64) -> Self {
        let shapes: Vec<Tensor> = model
            .named_params()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.clone(),
            v: shapes,
        }
    }

    /// One update; `trainable` masks parameters by their fixed index.
    pub fn update(&mut self, model: &mut ModelState, grads: &[Tensor], trainable: &[bool]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (_, p)) in model.named_params_mut().into_iter().enumerate() {
            if !trainable[i] {
                continue;
            }
            let g = &grads[i];
            for j in 0..p.len() {
                let gj = g.data()[j];
                let mj = self.beta1 * self.m[i].data()[j] + (1.0 - self.beta1) * gj;
                let vj = self.beta2 * self.v[i].data()[j] + (1.0 - self.beta2) * gj * gj;
                self.m[i].data_mut()[j] = mj;
                self.v[i].data_mut()[j] = vj;
                p.data_mut()[j] -= self.lr * (mj / bc1) / ((vj / bc2).sqrt() + self.eps);
            }
        }
    }
}

fn cross_entropy(g: &mut Graph, logits: NodeId, label: usize) -> CoreResult<NodeId> {
    let lsm = g.log_softmax(logits)?;
    let picked = g.index(lsm, label)?;
    Ok(g.scale(picked, -1.0)?)
}

/// Loss graph for one sample; returns the scalar loss node.
fn build_loss(
    g: &mut Graph,
    model: &ModelState,
    params: &super::BoundParams,
    concept_matrix: Tensor,
    sample: &MemeSample,
) -> CoreResult<NodeId> {
    let cfg = &model.config;
    let adversarial = cfg.adv_latent_weight > 0.0 || cfg.adv_pooled_weight > 0.0;
    let mask = vec![true; cfg.n_concepts];
    let nodes = build_trace(
        g,
        model,
        params,
        concept_matrix,
        TextInput::Tokens(&sample.text_tokens),
        sample.image_matrix(),
        &mask,
        cfg.adv_pooled_weight > 0.0,
    )?;
    let label = sample.label as usize;
    let mut total = cross_entropy(g, nodes.logits, label)?;

    if adversarial && cfg.adv_latent_weight > 0.0 {
        let rev = g.gradient_reversal(nodes.latent, cfg.grl_lambda)?;
        let wx = g.matmul(params.id_of("adv_latent_w"), rev)?;
        let logits_l = g.add(wx, params.id_of("adv_latent_b"))?;
        let ce = cross_entropy(g, logits_l, label)?;
        let scaled = g.scale(ce, cfg.adv_latent_weight)?;
        total = g.add(total, scaled)?;
    }
    if adversarial && cfg.adv_pooled_weight > 0.0 {
        let pooled = nodes.pooled_plain.expect("plain pass built");
        let rev = g.gradient_reversal(pooled, cfg.grl_lambda)?;
        let wx = g.matmul(params.id_of("adv_pooled_w"), rev)?;
        let logits_m = g.add(wx, params.id_of("adv_pooled_b"))?;
        let ce = cross_entropy(g, logits_m, label)?;
        let scaled = g.scale(ce, cfg.adv_pooled_weight)?;
        total = g.add(total, scaled)?;
    }
    Ok(total)
}

/// Loss and per-parameter gradients for one sample against frozen weights.
fn sample_loss_and_grads(
    model: &ModelState,
    concept_matrix: &Tensor,
    sample: &MemeSample,
) -> CoreResult<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let params = bind_params(&mut g, model)?;
    let loss = build_loss(&mut g, model, &params, concept_matrix.clone(), sample)?;
    let grads = g.backward(loss)?;
    let out = params.ids.iter().map(|id| grads.get(&g, *id)).collect();
    Ok((g.value(loss).item(), out))
}

fn run_training(
    model: &mut ModelState,
    vocab: &ConceptVocabulary,
    samples: &[MemeSample],
    cfg: &TrainConfig,
    trainable: &[bool],
) -> CoreResult<TrainReport> {
    if samples.is_empty() {
        return Err(CoreError::EmptyInput("training set"));
    }
    let concept_matrix = vocab.matrix();
    let mut adam = Adam::new(model, cfg.lr);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(cfg.seed, 0xBA7C));
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let refs: Vec<&MemeSample> = batch.iter().map(|&i| &samples[i]).collect();
            let frozen: &ModelState = model;
            let results = par::map_slice(&refs, |s| {
                sample_loss_and_grads(frozen, &concept_matrix, s)
            });
            // Ordered sequential reduction keeps results scheduler-independent.
            let mut batch_loss = 0.0;
            let mut acc: Option<Vec<Tensor>> = None;
            for r in results {
                let (loss, grads) = r.map_err(|e| diverged(e, epoch))?;
                batch_loss += loss;
                match &mut acc {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            a.add_scaled(g, 1.0);
                        }
                    }
                    slot => *slot = Some(grads),
                }
            }
            let mut grads = acc.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            for t in grads.iter_mut() {
                *t = t.scaled(scale);
            }
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(CoreError::Diverged(format!(
                    "loss became non-finite in epoch {epoch}"
                )));
            }
            adam.update(model, &grads, trainable);
            epoch_loss += batch_loss * batch.len() as f64;
        }
        epoch_losses.push(epoch_loss / samples.len() as f64);
    }
    let final_loss = *epoch_losses.last().expect("at least one epoch");
    Ok(TrainReport {
        epoch_losses,
        final_loss,
    })
}

fn diverged(e: CoreError, epoch: usize) -> CoreError {
    match e {
        CoreError::Autodiff(crate::error::AutodiffError::NonFinite { op }) => CoreError::Diverged(
            format!("non-finite value in op {op} during epoch {epoch}"),
        ),
        other => other,
    }
}

/// Train every parameter.
pub fn train(
    model: &mut ModelState,
    vocab: &ConceptVocabulary,
    samples: &[MemeSample],
    cfg: &TrainConfig,
) -> CoreResult<TrainReport> {
    let trainable = vec![true; model.named_params().len()];
    run_training(model, vocab, samples, cfg, &trainable)
}

/// Fine-tune only the classifier and adversarial heads (used after the
/// concept matrix has been re-projected).
pub fn train_heads_only(
    model: &mut ModelState,
    vocab: &ConceptVocabulary,
    samples: &[MemeSample],
    cfg: &TrainConfig,
) -> CoreResult<TrainReport> {
    let trainable: Vec<bool> = model
        .named_params()
        .iter()
        .map(|(name, _)| name.starts_with("classifier_") || name.starts_with("adv_"))
        .collect();
    run_training(model, vocab, samples, cfg, &trainable)
}

/// Accuracy and binary F1 of the main head over a dataset.
pub fn evaluate_classifier(
    model: &ModelState,
    vocab: &ConceptVocabulary,
    samples: &[MemeSample],
) -> CoreResult<(f64, f64)> {
    let mask = vec![true; model.config.n_concepts];
    let preds = par::map_slice(samples, |s| {
        super::forward_classify(model, vocab, s, &mask).map(|t| t.predicted)
    });
    let mut correct = 0usize;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (s, p) in samples.iter().zip(preds) {
        let p = p?;
        let y = s.label as usize;
        correct += usize::from(p == y);
        match (p, y) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => {}
        }
    }
    let accuracy = correct as f64 / samples.len() as f64;
    let f1 = if 2 * tp + fp + fn_ == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    Ok((accuracy, f1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synthdata::{self, GeneratorConfig};

    fn gen_cfg(samples: usize, seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            n_concepts: 4,
            embed_dim: 8,
            samples,
            tokens_per_sample: 5,
            image_regions: 2,
            noise_sigma: 0.05,
            offensive: vec![0, 1],
            positive_rate: 0.5,
            correlated: false,
            correlation: 0.85,
            seed,
        }
    }

    fn tiny_model(seed: u64) -> ModelState {
        let cfg = ModelConfig {
            heads: 2,
            ..ModelConfig::new(8, synthdata::token_table_size(4), 4)
        };
        ModelState::init(cfg, seed).unwrap()
    }

    #[test]
    fn separable_batch_reaches_high_accuracy() {
        let (samples, vocab) = synthdata::generate(&gen_cfg(32, 3)).unwrap();
        let mut model = tiny_model(1);
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 32,
            lr: 2e-3,
            seed: 42,
        };
        train(&mut model, &vocab, &samples, &cfg).unwrap();
        let (acc, _) = evaluate_classifier(&model, &vocab, &samples).unwrap();
        assert!(acc >= 0.95, "training accuracy {acc}");
    }

    #[test]
    fn plain_classification_overfits_one_sample_monotonically() {
        // alpha = beta = 0 reduces to plain classification; on a single
        // sample the loss must decrease every epoch.
        let (samples, vocab) = synthdata::generate(&gen_cfg(1, 9)).unwrap();
        let mut model = tiny_model(2);
        model.config.adv_latent_weight = 0.0;
        model.config.adv_pooled_weight = 0.0;
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 1,
            lr: 1e-3,
            seed: 42,
        };
        let report = train(&mut model, &vocab, &samples, &cfg).unwrap();
        for w in report.epoch_losses.windows(2) {
            assert!(w[1] < w[0], "loss curve {:?}", report.epoch_losses);
        }
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let (samples, vocab) = synthdata::generate(&gen_cfg(24, 5)).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            lr: 1e-3,
            seed: 42,
        };
        let mut a = tiny_model(4);
        let mut b = tiny_model(4);
        train(&mut a, &vocab, &samples, &cfg).unwrap();
        train(&mut b, &vocab, &samples, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adversarial_gradient_is_minus_lambda_times_plain() {
        // Gradient of the adversarial CE through the GRL equals -lambda
        // times the gradient of the same CE without the GRL.
        let (samples, vocab) = synthdata::generate(&gen_cfg(1, 13)).unwrap();
        let mut model = tiny_model(6);
        // Give the adversarial head nonzero weights so gradients flow.
        model.adv_latent_w = Tensor::matrix(2, 8, (0..16).map(|i| 0.1 * i as f64).collect())
            .unwrap();
        let lambda = 0.7;
        let concept_matrix = vocab.matrix();
        let mask = vec![true; 4];

        let grad_encoder_param = |with_grl: bool| -> Vec<f64> {
            let mut g = Graph::new();
            let params = bind_params(&mut g, &model).unwrap();
            let nodes = build_trace(
                &mut g,
                &model,
                &params,
                concept_matrix.clone(),
                TextInput::Tokens(&samples[0].text_tokens),
                samples[0].image_matrix(),
                &mask,
                false,
            )
            .unwrap();
            let head_in = if with_grl {
                g.gradient_reversal(nodes.latent, lambda).unwrap()
            } else {
                nodes.latent
            };
            let wx = g.matmul(params.id_of("adv_latent_w"), head_in).unwrap();
            let logits = g.add(wx, params.id_of("adv_latent_b")).unwrap();
            let ce = cross_entropy(&mut g, logits, samples[0].label as usize).unwrap();
            let grads = g.backward(ce).unwrap();
            grads
                .get(&g, params.id_of("routing.0"))
                .data()
                .to_vec()
        };

        let with = grad_encoder_param(true);
        let without = grad_encoder_param(false);
        for (a, b) in with.iter().zip(without.iter()) {
            assert!((a - (-lambda) * b).abs() < 1e-12, "{a} vs {}", -lambda * b);
        }
    }
}
