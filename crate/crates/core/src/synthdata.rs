//! Synthetic multimodal datasets with planted ground-truth concepts.
//!
//! Each sample plants 1-3 concepts. Text tokens come from per-concept token
//! pools, image features are the mean of the planted concept embeddings plus
//! Gaussian noise, and the label is 1 exactly when a planted concept belongs
//! to the configured offensive subset. Because the planted set is recorded,
//! causal recovery and the top-5 trustworthiness metrics can be checked
//! against known ground truth.

use crate::concepts::{Concept, ConceptVocabulary};
use crate::error::{CoreError, CoreResult};
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Tokens per concept pool; token ids `[i*POOL, (i+1)*POOL)` belong to
/// concept `i`.
pub const TOKENS_PER_CONCEPT: usize = 10;
/// Shared noise tokens appended after all concept pools.
pub const NOISE_TOKENS: usize = 20;

/// Size of the token table implied by an `n`-concept vocabulary.
pub fn token_table_size(n_concepts: usize) -> usize {
    n_concepts * TOKENS_PER_CONCEPT + NOISE_TOKENS
}

/// One synthetic meme: token ids, image region features, binary label, and
/// the planted gold concepts.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MemeSample {
    pub id: u64,
    pub text_tokens: Vec<usize>,
    pub image_feats: Vec<Vec<f64>>,
    pub label: u8,
    pub gold_concepts: Vec<usize>,
}

impl MemeSample {
    pub fn image_matrix(&self) -> Tensor {
        Tensor::from_rows(&self.image_feats).expect("validated on load")
    }

    fn validate(&self, line: usize, path: &str, dim: Option<usize>) -> CoreResult<()> {
        if self.text_tokens.is_empty() {
            return Err(CoreError::MalformedRecord {
                path: path.into(),
                line,
                detail: "empty text_tokens".into(),
            });
        }
        if self.image_feats.is_empty() {
            return Err(CoreError::MalformedRecord {
                path: path.into(),
                line,
                detail: "empty image_feats".into(),
            });
        }
        if self.label > 1 {
            return Err(CoreError::MalformedRecord {
                path: path.into(),
                line,
                detail: format!("label {} is not binary", self.label),
            });
        }
        let d0 = self.image_feats[0].len();
        for row in &self.image_feats {
            if row.len() != d0 {
                return Err(CoreError::MalformedRecord {
                    path: path.into(),
                    line,
                    detail: "ragged image_feats".into(),
                });
            }
        }
        if let Some(d) = dim {
            if d0 != d {
                return Err(CoreError::MalformedRecord {
                    path: path.into(),
                    line,
                    detail: format!("image feature dim {d0} != vocabulary dim {d}"),
                });
            }
        }
        Ok(())
    }
}

/// Generator settings. The label rule is fixed: label 1 iff a planted
/// concept is in `offensive`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GeneratorConfig {
    pub n_concepts: usize,
    pub embed_dim: usize,
    pub samples: usize,
    pub tokens_per_sample: usize,
    pub image_regions: usize,
    pub noise_sigma: f64,
    /// Concept ids whose presence makes a sample offensive.
    pub offensive: Vec<usize>,
    /// Target fraction of label-1 samples.
    pub positive_rate: f64,
    /// Mix consecutive concept pairs so concepts correlate.
    pub correlated: bool,
    /// Mixing coefficient for correlated mode.
    pub correlation: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        // All concepts except funny/politics/international-relation/immigration
        // count as offensive under the default 18-name vocabulary.
        let offensive = (0..18).filter(|i| ![3, 7, 9, 13].contains(i)).collect();
        GeneratorConfig {
            n_concepts: 18,
            embed_dim: 64,
            samples: 1000,
            tokens_per_sample: 8,
            image_regions: 4,
            noise_sigma: 0.1,
            offensive,
            positive_rate: 0.5,
            correlated: false,
            correlation: 0.85,
            seed: 42,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> CoreResult<()> {
        if self.n_concepts < 2 {
            return Err(CoreError::InvalidConfig("need at least 2 concepts".into()));
        }
        if self.offensive.is_empty() || self.offensive.len() >= self.n_concepts {
            return Err(CoreError::InvalidConfig(
                "offensive subset must be nonempty and proper".into(),
            ));
        }
        if self.offensive.iter().any(|&i| i >= self.n_concepts) {
            return Err(CoreError::InvalidConfig(
                "offensive subset references unknown concept".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(CoreError::InvalidConfig("noise_sigma must be >= 0".into()));
        }
        if self.embed_dim < self.n_concepts {
            return Err(CoreError::InvalidConfig(format!(
                "orthogonalization needs embed_dim >= n_concepts ({} < {})",
                self.embed_dim, self.n_concepts
            )));
        }
        if !(0.0..=1.0).contains(&self.positive_rate) {
            return Err(CoreError::InvalidConfig(
                "positive_rate must be in [0, 1]".into(),
            ));
        }
        if self.tokens_per_sample == 0 || self.image_regions == 0 {
            return Err(CoreError::InvalidConfig(
                "tokens_per_sample and image_regions must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Random rows orthonormalized by Gram-Schmidt.
fn orthonormal_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| gaussian(rng)).collect())
        .collect();
    for i in 0..n {
        for j in 0..i {
            let proj: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            for k in 0..d {
                rows[i][k] -= proj * rows[j][k];
            }
        }
        let norm: f64 = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in rows[i].iter_mut() {
            *v /= norm;
        }
    }
    rows
}

/// Generate a dataset and its vocabulary. Pure function of the config.
pub fn generate(config: &GeneratorConfig) -> CoreResult<(Vec<MemeSample>, ConceptVocabulary)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.n_concepts;
    let d = config.embed_dim;

    let mut embeddings = orthonormal_rows(n, d, &mut rng);
    if config.correlated {
        // Mix consecutive pairs (0,1), (2,3), ... so each odd concept leans
        // toward its even partner; this is what de-confounding must undo.
        let rho = config.correlation;
        for pair in 0..n / 2 {
            let (a, b) = (2 * pair, 2 * pair + 1);
            let mixed: Vec<f64> = embeddings[b]
                .iter()
                .zip(&embeddings[a])
                .map(|(eb, ea)| rho * ea + (1.0 - rho * rho).sqrt() * eb)
                .collect();
            let norm: f64 = mixed.iter().map(|v| v * v).sum::<f64>().sqrt();
            embeddings[b] = mixed.into_iter().map(|v| v / norm).collect();
        }
    }

    let names = ConceptVocabulary::default_names(n);
    let concepts = (0..n)
        .map(|i| Concept {
            id: i,
            name: names[i].clone(),
            embedding: embeddings[i].clone(),
        })
        .collect();
    let vocabulary = ConceptVocabulary::new(d, concepts)?;

    let non_offensive: Vec<usize> =
        (0..n).filter(|i| !config.offensive.contains(i)).collect();

    let mut samples = Vec::with_capacity(config.samples);
    for id in 0..config.samples {
        let positive = rng.gen::<f64>() < config.positive_rate;
        let planted = plant_concepts(config, &non_offensive, positive, &mut rng);

        let mut text_tokens = Vec::with_capacity(config.tokens_per_sample);
        for _ in 0..config.tokens_per_sample {
            if rng.gen::<f64>() < 0.8 {
                let c = planted[rng.gen_range(0..planted.len())];
                text_tokens
                    .push(c * TOKENS_PER_CONCEPT + rng.gen_range(0..TOKENS_PER_CONCEPT));
            } else {
                text_tokens.push(n * TOKENS_PER_CONCEPT + rng.gen_range(0..NOISE_TOKENS));
            }
        }

        let mut proto = vec![0.0; d];
        for &c in &planted {
            for (p, e) in proto.iter_mut().zip(&embeddings[c]) {
                *p += e / planted.len() as f64;
            }
        }
        let image_feats: Vec<Vec<f64>> = (0..config.image_regions)
            .map(|_| {
                proto
                    .iter()
                    .map(|p| p + config.noise_sigma * gaussian(&mut rng))
                    .collect()
            })
            .collect();

        let label =
            u8::from(planted.iter().any(|c| config.offensive.contains(c)));
        let mut gold_concepts = planted;
        gold_concepts.sort_unstable();
        samples.push(MemeSample {
            id: id as u64,
            text_tokens,
            image_feats,
            label,
            gold_concepts,
        });
    }
    Ok((samples, vocabulary))
}

fn plant_concepts(
    config: &GeneratorConfig,
    non_offensive: &[usize],
    positive: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut planted: Vec<usize> = Vec::new();
    if positive {
        let count = rng.gen_range(1..=3usize);
        planted.push(config.offensive[rng.gen_range(0..config.offensive.len())]);
        while planted.len() < count {
            let c = rng.gen_range(0..config.n_concepts);
            if !planted.contains(&c) {
                planted.push(c);
            }
        }
    } else {
        let count = rng.gen_range(1..=3usize.min(non_offensive.len()));
        while planted.len() < count {
            let c = non_offensive[rng.gen_range(0..non_offensive.len())];
            if !planted.contains(&c) {
                planted.push(c);
            }
        }
    }
    planted
}

/// Deterministic train/test split by shuffled indices.
pub fn split(
    samples: &[MemeSample],
    test_fraction: f64,
    seed: u64,
) -> (Vec<MemeSample>, Vec<MemeSample>) {
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_test = ((samples.len() as f64) * test_fraction).round() as usize;
    let test: Vec<MemeSample> = idx[..n_test].iter().map(|&i| samples[i].clone()).collect();
    let train: Vec<MemeSample> = idx[n_test..].iter().map(|&i| samples[i].clone()).collect();
    (train, test)
}

/// Write one JSON object per line.
pub fn save(samples: &[MemeSample], path: &Path) -> CoreResult<()> {
    let io_err = |e| CoreError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    for s in samples {
        serde_json::to_writer(&mut f, s)?;
        f.write_all(b"\n").map_err(io_err)?;
    }
    f.flush().map_err(io_err)?;
    Ok(())
}

/// Read a JSONL dataset; malformed lines are reported with their line
/// number. `dim` (when known) is checked against every image feature row.
pub fn load(path: &Path, dim: Option<usize>) -> CoreResult<Vec<MemeSample>> {
    let f = std::fs::File::open(path).map_err(|e| CoreError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let reader = BufReader::new(f);
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CoreError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: MemeSample =
            serde_json::from_str(&line).map_err(|e| CoreError::MalformedRecord {
                path: path.display().to_string(),
                line: i + 1,
                detail: e.to_string(),
            })?;
        sample.validate(i + 1, &path.display().to_string(), dim)?;
        samples.push(sample);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small_config() -> GeneratorConfig {
        GeneratorConfig {
            n_concepts: 6,
            embed_dim: 8,
            samples: 40,
            tokens_per_sample: 5,
            image_regions: 3,
            noise_sigma: 0.05,
            offensive: vec![0, 1, 2, 3],
            positive_rate: 0.5,
            correlated: false,
            correlation: 0.85,
            seed: 42,
        }
    }

    #[test]
    fn noiseless_single_concept_equals_prototype() {
        let mut cfg = small_config();
        cfg.noise_sigma = 0.0;
        let (samples, vocab) = generate(&cfg).unwrap();
        for s in samples.iter().filter(|s| s.gold_concepts.len() == 1) {
            let c = s.gold_concepts[0];
            for row in &s.image_feats {
                for (a, b) in row.iter().zip(vocab.embedding(c)) {
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn label_rule_matches_offensive_overlap() {
        let (samples, _) = generate(&small_config()).unwrap();
        for s in &samples {
            let any = s.gold_concepts.iter().any(|c| [0, 1, 2, 3].contains(c));
            assert_eq!(s.label == 1, any, "sample {}", s.id);
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let dir = tempdir().unwrap();
        let (a, _) = generate(&small_config()).unwrap();
        let (b, _) = generate(&small_config()).unwrap();
        let pa = dir.path().join("a.jsonl");
        let pb = dir.path().join("b.jsonl");
        save(&a, &pa).unwrap();
        save(&b, &pb).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempdir().unwrap();
        let (samples, _) = generate(&small_config()).unwrap();
        let p = dir.path().join("data.jsonl");
        save(&samples, &p).unwrap();
        let loaded = load(&p, Some(8)).unwrap();
        assert_eq!(samples, loaded);
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(load(&p, None).unwrap().is_empty());
    }

    #[test]
    fn truncated_line_reports_its_number() {
        let dir = tempdir().unwrap();
        let (samples, _) = generate(&small_config()).unwrap();
        let p = dir.path().join("trunc.jsonl");
        save(&samples[..2], &p).unwrap();
        let mut text = std::fs::read_to_string(&p).unwrap();
        text.truncate(text.len() - 10);
        std::fs::write(&p, text).unwrap();
        match load(&p, None) {
            Err(CoreError::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed record, got {other:?}"),
        }
    }

    #[test]
    fn class_balance_tracks_positive_rate() {
        let mut cfg = small_config();
        cfg.samples = 1000;
        let (samples, _) = generate(&cfg).unwrap();
        let rate = samples.iter().filter(|s| s.label == 1).count() as f64 / 1000.0;
        assert!((rate - 0.5).abs() < 0.05, "rate {rate}");
    }

    #[test]
    fn linear_probe_recovers_planted_concepts() {
        // Mean image feature dotted with each concept embedding separates
        // planted from absent concepts at sigma = 0.1.
        let mut cfg = small_config();
        cfg.samples = 300;
        cfg.noise_sigma = 0.1;
        let (samples, vocab) = generate(&cfg).unwrap();
        let mut correct = 0usize;
        let mut total = 0usize;
        for s in &samples {
            let d = cfg.embed_dim;
            let mut mean = vec![0.0; d];
            for row in &s.image_feats {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v / s.image_feats.len() as f64;
                }
            }
            for c in 0..cfg.n_concepts {
                let score: f64 = mean.iter().zip(vocab.embedding(c)).map(|(a, b)| a * b).sum();
                let predicted = score > 0.5 / 3.0;
                let planted = s.gold_concepts.contains(&c);
                correct += usize::from(predicted == planted);
                total += 1;
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc > 0.95, "probe accuracy {acc}");
    }

    #[test]
    fn orthogonalization_requires_enough_dims() {
        let mut cfg = small_config();
        cfg.embed_dim = 4;
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn correlated_mode_mixes_pairs() {
        let mut cfg = small_config();
        cfg.correlated = true;
        let (_, vocab) = generate(&cfg).unwrap();
        let dot: f64 = vocab
            .embedding(0)
            .iter()
            .zip(vocab.embedding(1))
            .map(|(a, b)| a * b)
            .sum();
        assert!(dot > 0.7, "pair correlation {dot}");
    }
}
