//! Ranked concept sets and their JSONL records.

use serde::{Deserialize, Serialize};

/// Where a ranking came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RankSource {
    #[serde(rename = "causal")]
    Causal,
    #[serde(rename = "saliency")]
    Saliency,
    #[serde(rename = "inputxgrad")]
    InputXGradient,
    #[serde(rename = "ig")]
    IntegratedGradients,
    #[serde(rename = "gradshap")]
    GradientShap,
    #[serde(rename = "deeplift")]
    DeepLift,
    #[serde(rename = "deepliftshap")]
    DeepLiftShap,
}

impl RankSource {
    pub const ALL_ATTRIBUTION: [RankSource; 6] = [
        RankSource::Saliency,
        RankSource::InputXGradient,
        RankSource::IntegratedGradients,
        RankSource::GradientShap,
        RankSource::DeepLift,
        RankSource::DeepLiftShap,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            RankSource::Causal => "causal",
            RankSource::Saliency => "saliency",
            RankSource::InputXGradient => "inputxgrad",
            RankSource::IntegratedGradients => "ig",
            RankSource::GradientShap => "gradshap",
            RankSource::DeepLift => "deeplift",
            RankSource::DeepLiftShap => "deepliftshap",
        }
    }

    pub fn from_tag(tag: &str) -> Option<RankSource> {
        match tag {
            "causal" => Some(RankSource::Causal),
            "saliency" => Some(RankSource::Saliency),
            "inputxgrad" => Some(RankSource::InputXGradient),
            "ig" => Some(RankSource::IntegratedGradients),
            "gradshap" => Some(RankSource::GradientShap),
            "deeplift" => Some(RankSource::DeepLift),
            "deepliftshap" => Some(RankSource::DeepLiftShap),
            _ => None,
        }
    }
}

/// Concept ids ordered by non-increasing score; ties broken by ascending id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedConceptSet {
    pub source: RankSource,
    pub order: Vec<usize>,
    pub scores: Vec<f64>,
}

impl RankedConceptSet {
    /// Sort `scores[i]` for concept `i` into a ranking.
    pub fn from_scores(source: RankSource, scores: &[f64]) -> RankedConceptSet {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        RankedConceptSet {
            source,
            order: order.clone(),
            scores: order.iter().map(|&i| scores[i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// One JSONL line of the analyze stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankingRecord {
    pub sample_id: u64,
    pub source: RankSource,
    pub order: Vec<usize>,
    pub scores: Vec<f64>,
}

impl RankingRecord {
    pub fn new(sample_id: u64, set: &RankedConceptSet) -> Self {
        RankingRecord {
            sample_id,
            source: set.source,
            order: set.order.clone(),
            scores: set.scores.clone(),
        }
    }

    pub fn into_set(self) -> RankedConceptSet {
        RankedConceptSet {
            source: self.source,
            order: self.order,
            scores: self.scores,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sorting_with_tie_break() {
        let set = RankedConceptSet::from_scores(RankSource::Causal, &[0.3, 0.1, 0.5]);
        assert_eq!(set.order, vec![2, 0, 1]);
        assert_eq!(set.scores, vec![0.5, 0.3, 0.1]);
    }

    #[test]
    fn all_zero_scores_fall_back_to_id_order() {
        let set = RankedConceptSet::from_scores(RankSource::Causal, &[0.0; 4]);
        assert_eq!(set.order, vec![0, 1, 2, 3]);
    }

    #[test]
    fn source_tags_round_trip() {
        for s in RankSource::ALL_ATTRIBUTION
            .iter()
            .chain([RankSource::Causal].iter())
        {
            assert_eq!(RankSource::from_tag(s.tag()), Some(*s));
        }
        let json = serde_json::to_string(&RankSource::Causal).unwrap();
        assert_eq!(json, "\"causal\"");
    }
}
