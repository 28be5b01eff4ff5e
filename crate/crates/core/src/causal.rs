//! Per-concept counterfactual effect scores and causal rankings.
//!
//! The effect of a concept on one sample is measured by intervention: rebuild
//! the latent with that concept's weight forced to zero and take the change
//! in the probability of the originally predicted class. Scores are pure
//! functions of (model, vocabulary, sample), so profiles over a dataset can
//! run sample-parallel with a deterministic ordered reduction.

use crate::concepts::ConceptVocabulary;
use crate::error::CoreResult;
use crate::model::{forward_classify, ForwardTrace, ModelState};
use crate::par;
use crate::ranking::{RankSource, RankedConceptSet};
use crate::synthdata::MemeSample;
use serde::{Deserialize, Serialize};

/// Signed scores are available for diagnostics; the default takes the
/// absolute probability change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EffectMode {
    Absolute,
    Signed,
}

/// Effect of removing one concept from one sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiteScore {
    pub concept: usize,
    /// Change in the predicted-class probability; in `[0, 1]` in absolute
    /// mode.
    pub rite: f64,
    /// The class whose probability is tracked: the un-intervened argmax.
    pub reference_class: usize,
}

fn masked_probability(
    model: &ModelState,
    vocab: &ConceptVocabulary,
    sample: &MemeSample,
    concept: usize,
    class: usize,
) -> CoreResult<f64> {
    let mut mask = vec![true; model.config.n_concepts];
    mask[concept] = false;
    let trace = forward_classify(model, vocab, sample, &mask)?;
    Ok(trace.probabilities[class])
}

fn effect_from(base: &ForwardTrace, masked_prob: f64, mode: EffectMode) -> f64 {
    let delta = masked_prob - base.probabilities[base.predicted];
    match mode {
        EffectMode::Absolute => delta.abs(),
        EffectMode::Signed => delta,
    }
}

/// Effect score for a single concept.
pub fn rite(
    model: &ModelState,
    vocab: &ConceptVocabulary,
    sample: &MemeSample,
    concept: usize,
    mode: EffectMode,
) -> CoreResult<RiteScore> {
    let mask = vec![true; model.config.n_concepts];
    let base = forward_classify(model, vocab, sample, &mask)?;
    let masked = masked_probability(model, vocab, sample, concept, base.predicted)?;
    Ok(RiteScore {
        concept,
        rite: effect_from(&base, masked, mode),
        reference_class: base.predicted,
    })
}

/// Effect scores for every concept, reusing one un-intervened trace.
pub fn rite_all(
    model: &ModelState,
    vocab: &ConceptVocabulary,
    sample: &MemeSample,
    mode: EffectMode,
) -> CoreResult<Vec<RiteScore>> {
    let n = model.config.n_concepts;
    let mask = vec![true; n];
    let base = forward_classify(model, vocab, sample, &mask)?;
    (0..n)
        .map(|concept| {
            let masked = masked_probability(model, vocab, sample, concept, base.predicted)?;
            Ok(RiteScore {
                concept,
                rite: effect_from(&base, masked, mode),
                reference_class: base.predicted,
            })
        })
        .collect()
}

/// All concepts sorted by decreasing effect, ties by ascending id.
pub fn causal_ranking(
    model: &ModelState,
    vocab: &ConceptVocabulary,
    sample: &MemeSample,
    mode: EffectMode,
) -> CoreResult<RankedConceptSet> {
    let scores = rite_all(model, vocab, sample, mode)?;
    let raw: Vec<f64> = scores.iter().map(|s| s.rite).collect();
    Ok(RankedConceptSet::from_scores(RankSource::Causal, &raw))
}

/// Per-concept mean and population standard deviation over a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiteProfile {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl RiteProfile {
    /// Standard deviation of the per-concept means: the across-concept
    /// dispersion that de-confounding is supposed to shrink.
    pub fn mean_dispersion(&self) -> f64 {
        let n = self.mean.len() as f64;
        let mu = self.mean.iter().sum::<f64>() / n;
        (self.mean.iter().map(|m| (m - mu) * (m - mu)).sum::<f64>() / n).sqrt()
    }
}

/// Mean and std of effect scores per concept over `samples`.
pub fn mean_rite_profile(
    model: &ModelState,
    vocab: &ConceptVocabulary,
    samples: &[MemeSample],
    mode: EffectMode,
) -> CoreResult<RiteProfile> {
    assert!(!samples.is_empty(), "profile needs a nonempty dataset");
    let n = model.config.n_concepts;
    let per_sample = par::map_slice(samples, |s| {
        rite_all(model, vocab, s, mode).map(|v| v.iter().map(|r| r.rite).collect::<Vec<f64>>())
    });
    let mut mean = vec![0.0; n];
    let mut sq = vec![0.0; n];
    let count = samples.len() as f64;
    let mut collected = Vec::with_capacity(samples.len());
    for r in per_sample {
        collected.push(r?);
    }
    for row in &collected {
        for i in 0..n {
            mean[i] += row[i] / count;
        }
    }
    for row in &collected {
        for i in 0..n {
            let d = row[i] - mean[i];
            sq[i] += d * d / count;
        }
    }
    Ok(RiteProfile {
        mean,
        std: sq.into_iter().map(f64::sqrt).collect(),
    })
}
