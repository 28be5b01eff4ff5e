//! Evaluation metrics: rank correlations, the simulatability protocol, and
//! top-5 trustworthiness against gold concepts.
//!
//! All metric functions are pure. The simulator is a linear max-margin
//! classifier trained by hinge-loss subgradient descent; its confidence for
//! a class is the sigmoid of the signed margin, which is what the
//! comprehensiveness and sufficiency deltas compare.

use crate::concepts::ConceptVocabulary;
use crate::error::{CoreError, CoreResult};
use crate::ranking::{RankSource, RankedConceptSet};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Rank-position discount for the bag-of-concepts simulator input.
pub const RANK_DISCOUNT: f64 = 0.9;

fn rank_vector(order: &[usize]) -> CoreResult<Vec<f64>> {
    let n = order.len();
    let mut ranks = vec![f64::NAN; n];
    for (pos, &id) in order.iter().enumerate() {
        if id >= n || !ranks[id].is_nan() {
            return Err(CoreError::InvalidConfig(format!(
                "order is not a permutation: id {id} at position {pos}"
            )));
        }
        ranks[id] = pos as f64;
    }
    Ok(ranks)
}

fn check_orders(a: &[usize], b: &[usize]) -> CoreResult<(Vec<f64>, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(CoreError::DimensionMismatch(format!(
            "orders of length {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok((rank_vector(a)?, rank_vector(b)?))
}

/// Kendall's tau-b between two orders of the same id set. Computed by
/// sorting one key and counting tie runs, with the standard tie-corrected
/// normalization.
pub fn kendall_tau(order_a: &[usize], order_b: &[usize]) -> CoreResult<f64> {
    let (x, y) = check_orders(order_a, order_b)?;
    Ok(tau_b(&x, &y))
}

/// Tau-b over paired score vectors (ties allowed).
pub fn tau_b(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    debug_assert_eq!(n, y.len());
    let mut pairs: Vec<(f64, f64)> = x.iter().cloned().zip(y.iter().cloned()).collect();
    pairs.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.partial_cmp(&b.1).unwrap())
    });

    // Concordant minus discordant via an insertion count over the second
    // key, walking the first-key order.
    let mut concordant_minus_discordant = 0i64;
    let mut tied_x = 0i64;
    let mut tied_y = 0i64;
    let mut tied_xy = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = pairs[j].0 - pairs[i].0;
            let dy = pairs[j].1 - pairs[i].1;
            if dx == 0.0 && dy == 0.0 {
                tied_xy += 1;
            } else if dx == 0.0 {
                tied_x += 1;
            } else if dy == 0.0 {
                tied_y += 1;
            } else if dy > 0.0 {
                concordant_minus_discordant += 1;
            } else {
                concordant_minus_discordant -= 1;
            }
        }
    }
    let total = (n * (n - 1) / 2) as f64;
    let denom_x = total - (tied_x + tied_xy) as f64;
    let denom_y = total - (tied_y + tied_xy) as f64;
    if denom_x <= 0.0 || denom_y <= 0.0 {
        return 0.0;
    }
    concordant_minus_discordant as f64 / (denom_x * denom_y).sqrt()
}

/// Spearman's rho between two orders: Pearson correlation of the rank
/// vectors (average ranks under ties, which orders never have).
pub fn spearman_rho(order_a: &[usize], order_b: &[usize]) -> CoreResult<f64> {
    let (x, y) = check_orders(order_a, order_b)?;
    Ok(pearson(&x, &y))
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in x.iter().zip(y.iter()) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// What the simulator sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimulatorMode {
    ExplanationOnly,
    InputOnly,
    Both,
}

/// Rank-discounted bag of concept embeddings:
/// `(1/n) * sum over ranks i of discount^i * embedding(concept at rank i)`.
pub fn rank_adjusted_bag(ranked: &RankedConceptSet, vocab: &ConceptVocabulary) -> Vec<f64> {
    let n = ranked.len() as f64;
    let mut out = vec![0.0; vocab.dim];
    let mut discount = 1.0;
    for &id in &ranked.order {
        discount *= RANK_DISCOUNT;
        for (o, e) in out.iter_mut().zip(vocab.embedding(id)) {
            *o += discount * e / n;
        }
    }
    out
}

/// Assemble one simulator input vector.
pub fn build_simulator_input(
    ranked: &RankedConceptSet,
    vocab: &ConceptVocabulary,
    pooled: &[f64],
    mode: SimulatorMode,
) -> Vec<f64> {
    match mode {
        SimulatorMode::ExplanationOnly => rank_adjusted_bag(ranked, vocab),
        SimulatorMode::InputOnly => pooled.to_vec(),
        SimulatorMode::Both => {
            let mut v = rank_adjusted_bag(ranked, vocab);
            v.extend_from_slice(pooled);
            v
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SimulatorConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        SimulatorConfig {
            epochs: 300,
            lr: 0.05,
            l2: 1e-4,
            seed: 42,
        }
    }
}

/// Linear max-margin classifier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearSimulator {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearSimulator {
    pub fn margin(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        usize::from(self.margin(x) > 0.0)
    }

    /// Class confidences: sigmoid of the signed margin.
    pub fn confidence(&self, x: &[f64]) -> [f64; 2] {
        let p1 = 1.0 / (1.0 + (-self.margin(x)).exp());
        [1.0 - p1, p1]
    }
}

/// Hinge-loss subgradient descent; deterministic per seed.
pub fn train_simulator(
    inputs: &[Vec<f64>],
    targets: &[usize],
    cfg: &SimulatorConfig,
) -> CoreResult<LinearSimulator> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(CoreError::EmptyInput("simulator training set"));
    }
    let ones = targets.iter().filter(|t| **t == 1).count();
    if ones == 0 || ones == targets.len() {
        return Err(CoreError::SingleClass);
    }
    let dim = inputs[0].len();
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr / (1.0 + 0.01 * epoch as f64);
        for &i in &order {
            let y = if targets[i] == 1 { 1.0 } else { -1.0 };
            let margin: f64 =
                w.iter().zip(&inputs[i]).map(|(w, v)| w * v).sum::<f64>() + b;
            for (wj, xj) in w.iter_mut().zip(&inputs[i]) {
                let hinge = if y * margin < 1.0 { -y * xj } else { 0.0 };
                *wj -= lr * (hinge + cfg.l2 * *wj);
            }
            if y * margin < 1.0 {
                b -= lr * (-y);
            }
        }
    }
    Ok(LinearSimulator { weights: w, bias: b })
}

/// Binary F1 for class 1.
pub fn f1_score(predictions: &[usize], targets: &[usize]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, t) in predictions.iter().zip(targets) {
        match (*p, *t) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => {}
        }
    }
    if 2 * tp + fp + fn_ == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// Confidence deltas against the both-inputs simulator, for one sample.
/// `k` is the class the both-simulator predicts.
pub fn comprehensiveness_sufficiency(
    sim_both: &LinearSimulator,
    sim_inp: &LinearSimulator,
    sim_exp: &LinearSimulator,
    x_both: &[f64],
    x_inp: &[f64],
    x_exp: &[f64],
) -> (f64, f64) {
    let c_both = sim_both.confidence(x_both);
    let k = usize::from(c_both[1] > c_both[0]);
    let comp = c_both[k] - sim_inp.confidence(x_inp)[k];
    let suff = c_both[k] - sim_exp.confidence(x_exp)[k];
    (comp, suff)
}

/// Top-5 overlap metrics for one ranking against a gold set.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TopFiveMetrics {
    pub precision: f64,
    pub recall: f64,
    pub map: f64,
    /// Set when fewer than 5 concepts exist; metrics were computed at this
    /// cutoff instead.
    pub truncated_at: Option<usize>,
}

/// `P@5 = |gold ∩ top5| / 5`, `R@5 = |gold ∩ top5| / |gold|`,
/// `MAP@5 = mean of P@k for k = 1..5`.
pub fn precision_recall_map_at5(order: &[usize], gold: &[usize]) -> CoreResult<TopFiveMetrics> {
    if gold.is_empty() {
        return Err(CoreError::EmptyInput("gold concept set"));
    }
    let k_max = order.len().min(5);
    if k_max == 0 {
        return Err(CoreError::EmptyInput("ranked concept set"));
    }
    let hit_at = |k: usize| -> usize {
        order[..k].iter().filter(|id| gold.contains(id)).count()
    };
    let precision = hit_at(k_max) as f64 / k_max as f64;
    let recall = hit_at(k_max) as f64 / gold.len() as f64;
    let map = (1..=k_max).map(|k| hit_at(k) as f64 / k as f64).sum::<f64>() / k_max as f64;
    Ok(TopFiveMetrics {
        precision,
        recall,
        map,
        truncated_at: (order.len() < 5).then_some(order.len()),
    })
}

/// Per-sample facts the evaluation needs besides the rankings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEval {
    pub sample_id: u64,
    pub gold: Vec<usize>,
    /// Pooled model vector with the latent (the simulator's input view).
    pub pooled: Vec<f64>,
    /// The model's own prediction, which the simulator imitates.
    pub model_prediction: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationConfig {
    /// Fraction of samples held out for simulator scoring.
    pub test_fraction: f64,
    pub split_seed: u64,
    pub simulator: SimulatorConfig,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            test_fraction: 0.2,
            split_seed: 42,
            simulator: SimulatorConfig::default(),
        }
    }
}

/// One row of the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub source: RankSource,
    pub kendall_tau: f64,
    pub spearman_rho: f64,
    pub comprehensiveness: f64,
    pub sufficiency: f64,
    pub f1_both: f64,
    pub f1_inp: f64,
    pub f1_exp: f64,
    pub p_at_5: f64,
    pub r_at_5: f64,
    pub map_at_5: f64,
}

/// Full metric suite for one pipeline configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ablation: String,
    pub methods: Vec<MethodMetrics>,
}

impl MetricsReport {
    /// Correlations and simulator columns, one row per method.
    pub fn table1_csv(&self) -> String {
        let mut out = String::from(
            "method,kendall_tau,spearman_rho,comprehensiveness,sufficiency,f1_both,f1_inp,f1_exp\n",
        );
        for m in &self.methods {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                m.source.tag(),
                m.kendall_tau,
                m.spearman_rho,
                m.comprehensiveness,
                m.sufficiency,
                m.f1_both,
                m.f1_inp,
                m.f1_exp
            ));
        }
        out
    }

    /// Trustworthiness columns keyed by (method, ablation).
    pub fn table2_csv(&self) -> String {
        let mut out = String::from("method,ablation,r_at_5,p_at_5,map_at_5\n");
        for m in &self.methods {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6}\n",
                m.source.tag(),
                self.ablation,
                m.r_at_5,
                m.p_at_5,
                m.map_at_5
            ));
        }
        out
    }
}

/// Deterministic stratified split indices `(train, test)`.
pub fn stratified_split(
    labels: &[usize],
    test_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in [0usize, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|i| labels[*i] == class).collect();
        idx.shuffle(&mut rng);
        let n_test = ((idx.len() as f64) * test_fraction).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Evaluate every source's rankings against the causal rankings and the
/// gold sets. `rankings` must contain [`RankSource::Causal`]; each source's
/// vector is aligned with `samples`.
pub fn evaluate(
    samples: &[SampleEval],
    rankings: &BTreeMap<RankSource, Vec<RankedConceptSet>>,
    vocab: &ConceptVocabulary,
    ablation: &str,
    cfg: &EvaluationConfig,
) -> CoreResult<MetricsReport> {
    let causal = rankings
        .get(&RankSource::Causal)
        .ok_or(CoreError::EmptyInput("causal rankings"))?;
    if causal.len() != samples.len() {
        return Err(CoreError::DimensionMismatch(format!(
            "{} causal rankings vs {} samples",
            causal.len(),
            samples.len()
        )));
    }

    let labels: Vec<usize> = samples.iter().map(|s| s.model_prediction).collect();
    let (train_idx, test_idx) = stratified_split(&labels, cfg.test_fraction, cfg.split_seed);

    // The input-only simulator sees the same vectors whatever the method.
    let inp_inputs: Vec<Vec<f64>> = samples.iter().map(|s| s.pooled.clone()).collect();
    let sim_inp = train_simulator(
        &gather(&inp_inputs, &train_idx),
        &gather(&labels, &train_idx),
        &cfg.simulator,
    )?;
    let inp_preds: Vec<usize> = test_idx
        .iter()
        .map(|&i| sim_inp.predict(&inp_inputs[i]))
        .collect();
    let f1_inp = f1_score(&inp_preds, &gather(&labels, &test_idx));

    let mut methods = Vec::new();
    for (source, sets) in rankings {
        if sets.len() != samples.len() {
            return Err(CoreError::DimensionMismatch(format!(
                "{} rankings for {:?} vs {} samples",
                sets.len(),
                source,
                samples.len()
            )));
        }
        let mut tau_sum = 0.0;
        let mut rho_sum = 0.0;
        for (c, s) in causal.iter().zip(sets.iter()) {
            tau_sum += kendall_tau(&c.order, &s.order)?;
            rho_sum += spearman_rho(&c.order, &s.order)?;
        }
        let count = samples.len() as f64;

        let exp_inputs: Vec<Vec<f64>> = sets
            .iter()
            .map(|r| rank_adjusted_bag(r, vocab))
            .collect();
        let both_inputs: Vec<Vec<f64>> = exp_inputs
            .iter()
            .zip(samples.iter())
            .map(|(e, s)| {
                let mut v = e.clone();
                v.extend_from_slice(&s.pooled);
                v
            })
            .collect();
        let sim_exp = train_simulator(
            &gather(&exp_inputs, &train_idx),
            &gather(&labels, &train_idx),
            &cfg.simulator,
        )?;
        let sim_both = train_simulator(
            &gather(&both_inputs, &train_idx),
            &gather(&labels, &train_idx),
            &cfg.simulator,
        )?;

        let exp_preds: Vec<usize> = test_idx
            .iter()
            .map(|&i| sim_exp.predict(&exp_inputs[i]))
            .collect();
        let both_preds: Vec<usize> = test_idx
            .iter()
            .map(|&i| sim_both.predict(&both_inputs[i]))
            .collect();
        let f1_exp = f1_score(&exp_preds, &gather(&labels, &test_idx));
        let f1_both = f1_score(&both_preds, &gather(&labels, &test_idx));

        let mut comp_sum = 0.0;
        let mut suff_sum = 0.0;
        for &i in &test_idx {
            let (c, s) = comprehensiveness_sufficiency(
                &sim_both,
                &sim_inp,
                &sim_exp,
                &both_inputs[i],
                &inp_inputs[i],
                &exp_inputs[i],
            );
            comp_sum += c;
            suff_sum += s;
        }
        let test_count = test_idx.len().max(1) as f64;

        let mut p_sum = 0.0;
        let mut r_sum = 0.0;
        let mut map_sum = 0.0;
        let mut gold_count = 0usize;
        for (set, s) in sets.iter().zip(samples.iter()) {
            if s.gold.is_empty() {
                continue;
            }
            let m = precision_recall_map_at5(&set.order, &s.gold)?;
            p_sum += m.precision;
            r_sum += m.recall;
            map_sum += m.map;
            gold_count += 1;
        }
        let gc = gold_count.max(1) as f64;

        methods.push(MethodMetrics {
            source: *source,
            kendall_tau: tau_sum / count,
            spearman_rho: rho_sum / count,
            comprehensiveness: comp_sum / test_count,
            sufficiency: suff_sum / test_count,
            f1_both,
            f1_inp,
            f1_exp,
            p_at_5: p_sum / gc,
            r_at_5: r_sum / gc,
            map_at_5: map_sum / gc,
        });
    }
    Ok(MetricsReport {
        ablation: ablation.to_string(),
        methods,
    })
}

fn gather<T: Clone>(xs: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| xs[i].clone()).collect()
}
