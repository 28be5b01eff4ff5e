//! Nullspace de-confounding of the concept matrix.
//!
//! A linear reconstructor is fit by gradient descent to recover each concept
//! embedding from the averaged latent built *without* that concept. If the
//! reconstruction succeeds, correlated concepts leak a removed concept back
//! into its counterfactual latent. Projecting every concept embedding
//! through the nullspace of the reconstructor's row space removes exactly
//! that leakage: afterwards the reconstructor maps every counterfactual
//! latent to zero, because any weighted sum of projected concepts stays
//! inside the nullspace.

use crate::concepts::ConceptVocabulary;
use crate::error::{CoreError, CoreResult};
use crate::model::routing::latent_values;
use crate::model::{routing_weights_only, train, ModelState};
use crate::par;
use crate::synthdata::MemeSample;
use crate::tensor::Tensor;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Per-concept counterfactual latents (columns) and their reconstruction
/// targets (the current concept embeddings, as columns).
#[derive(Debug, Clone)]
pub struct CounterfactualBank {
    /// `[d, n]`; column `i` is the latent with concept `i` masked, averaged
    /// over the dataset slice.
    pub latents: Tensor,
    /// `[d, n]`; column `i` is concept `i`'s embedding.
    pub targets: Tensor,
}

/// Average per-concept counterfactual latents over a dataset slice.
pub fn build_counterfactual_bank(
    model: &ModelState,
    vocab: &ConceptVocabulary,
    samples: &[MemeSample],
) -> CoreResult<CounterfactualBank> {
    if samples.is_empty() {
        return Err(CoreError::EmptyInput("counterfactual bank slice"));
    }
    let n = model.config.n_concepts;
    let d = model.config.embed_dim;
    let concept_matrix = vocab.matrix();

    let weights = par::map_slice(samples, |s| routing_weights_only(model, vocab, s));
    let mut columns = vec![vec![0.0; d]; n];
    let count = samples.len() as f64;
    for w in weights {
        let (dynamic, statics) = w?;
        for (i, column) in columns.iter_mut().enumerate() {
            let mut mask = vec![true; n];
            mask[i] = false;
            let latent = latent_values(&concept_matrix, &dynamic, &statics, &mask);
            for (acc, v) in column.iter_mut().zip(latent) {
                *acc += v / count;
            }
        }
    }

    let mut latents = Tensor::zeros(&[d, n]);
    let mut targets = Tensor::zeros(&[d, n]);
    for i in 0..n {
        for r in 0..d {
            latents.data_mut()[r * n + i] = columns[i][r];
            targets.data_mut()[r * n + i] = vocab.embedding(i)[r];
        }
    }
    Ok(CounterfactualBank { latents, targets })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_steps: usize,
    /// Stop when the loss improves by less than `min_improvement` over this
    /// many steps.
    pub patience: usize,
    pub min_improvement: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_steps: 5000,
            patience: 50,
            min_improvement: 1e-9,
        }
    }
}

/// Linear map fit to send counterfactual latents to concept embeddings.
#[derive(Debug, Clone)]
pub struct Reconstructor {
    /// `[d, d]`.
    pub weight: Tensor,
    pub loss_history: Vec<f64>,
    pub final_loss: f64,
    pub steps: usize,
    /// Set when the latent bank is all zero: the loss is constant and the
    /// weight stays unconstrained.
    pub degenerate: bool,
}

fn largest_eigenvalue(m: &Tensor) -> f64 {
    // Power iteration on a symmetric PSD matrix; deterministic start.
    let d = m.rows();
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..200 {
        let mut next = vec![0.0; d];
        for (r, slot) in next.iter_mut().enumerate() {
            *slot = m.row_slice(r).iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let norm: f64 = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        for x in next.iter_mut() {
            *x /= norm;
        }
        lambda = norm;
        v = next;
    }
    lambda
}

/// Minimize `|W A - C|_F^2` by gradient descent with an exact Lipschitz
/// step. Gradient iterations from zero stay in the row space of `A`, so the
/// result matches the minimum-norm least-squares solution.
pub fn fit_reconstructor(
    latents: &Tensor,
    targets: &Tensor,
    cfg: &FitConfig,
) -> CoreResult<Reconstructor> {
    let (d, n) = (latents.rows(), latents.cols());
    if targets.rows() != d || targets.cols() != n {
        return Err(CoreError::DimensionMismatch(format!(
            "latents {:?} vs targets {:?}",
            latents.shape(),
            targets.shape()
        )));
    }
    let frob = latents.frobenius_norm();
    if frob == 0.0 {
        let loss = targets.data().iter().map(|v| v * v).sum();
        return Ok(Reconstructor {
            weight: Tensor::zeros(&[d, d]),
            loss_history: vec![loss],
            final_loss: loss,
            steps: 0,
            degenerate: true,
        });
    }

    let a_t = latents.transposed();
    let gram = latents.matmul(&a_t); // A A^T, [d, d], PSD
    let lip = 2.0 * largest_eigenvalue(&gram);
    let step = 1.0 / lip;

    let mut w = Tensor::zeros(&[d, d]);
    let mut history = Vec::new();
    let mut best = f64::INFINITY;
    let mut since_best = 0usize;
    let mut steps = 0usize;
    for _ in 0..cfg.max_steps {
        let residual = {
            let mut r = w.matmul(latents);
            r.add_scaled(targets, -1.0);
            r
        };
        let loss: f64 = residual.data().iter().map(|v| v * v).sum();
        if !loss.is_finite() {
            return Err(CoreError::Diverged("reconstructor fit".into()));
        }
        history.push(loss);
        if best - loss < cfg.min_improvement {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        } else {
            since_best = 0;
        }
        best = best.min(loss);
        let grad = residual.matmul(&a_t).scaled(2.0);
        w.add_scaled(&grad, -step);
        steps += 1;
    }
    let final_loss = *history.last().expect("at least one step");
    Ok(Reconstructor {
        weight: w,
        loss_history: history,
        final_loss,
        steps,
        degenerate: false,
    })
}

/// Projector onto the nullspace of a reconstructor's row space.
#[derive(Debug, Clone)]
pub struct NullspaceProjector {
    /// `[d, d]`, symmetric and idempotent.
    pub matrix: Tensor,
    /// Effective rank of the reconstructor at the given tolerance.
    pub rank: usize,
    /// Gradient steps of the fit that produced the reconstructor; 0 when
    /// built directly from a matrix.
    pub fit_steps: usize,
}

impl NullspaceProjector {
    /// A full-rank reconstructor leaves no nullspace: the projector is zero
    /// and every concept embedding would be annihilated.
    pub fn is_full_rank(&self) -> bool {
        self.rank == self.matrix.rows()
    }
}

/// Singular-value threshold, relative to the largest singular value, below
/// which a direction does not count as row space.
pub const DEFAULT_RANK_TOLERANCE: f64 = 1e-10;

/// Closed-form construction via SVD: `P = I - V_r V_r^T` over the right
/// singular vectors with `sigma > tolerance * sigma_max`.
pub fn nullspace_projector(weight: &Tensor, tolerance: f64) -> NullspaceProjector {
    let d = weight.rows();
    let m = DMatrix::from_row_slice(d, weight.cols(), weight.data());
    let svd = m.svd(false, true);
    let v_t = svd.v_t.expect("requested");
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let rank = if sigma_max == 0.0 {
        0
    } else {
        svd.singular_values
            .iter()
            .filter(|s| **s > tolerance * sigma_max)
            .count()
    };

    // P = I - sum over row-space directions of v v^T.
    let mut p = vec![0.0; d * d];
    for i in 0..d {
        p[i * d + i] = 1.0;
    }
    for k in 0..rank {
        let v = v_t.row(k);
        for i in 0..d {
            for j in 0..d {
                p[i * d + j] -= v[i] * v[j];
            }
        }
    }
    // Symmetrize to scrub rounding asymmetry.
    for i in 0..d {
        for j in (i + 1)..d {
            let avg = 0.5 * (p[i * d + j] + p[j * d + i]);
            p[i * d + j] = avg;
            p[j * d + i] = avg;
        }
    }
    NullspaceProjector {
        matrix: Tensor::matrix(d, d, p).expect("square"),
        rank,
        fit_steps: 0,
    }
}

/// One round of the projection loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeconfoundRound {
    pub rank: usize,
    pub fit_loss: f64,
    pub fit_steps: usize,
    /// `max |W_round * L^{CF'}|` after re-projecting: the theorem check.
    pub residual_inf: f64,
    pub degenerate_bank: bool,
    pub full_rank_warning: bool,
}

/// JSON report of a de-confounding run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeconfoundReport {
    pub rounds: Vec<DeconfoundRound>,
    /// Rank of the final reconstructor.
    pub rank: usize,
    /// SHA-256 over the final projector's little-endian bytes.
    pub projector_checksum: String,
}

fn checksum(t: &Tensor) -> String {
    let mut hasher = Sha256::new();
    for v in t.data() {
        hasher.update(v.to_le_bytes());
    }
    format!("{:x}", hasher.finalize())
}

/// Fit, project, and re-project the vocabulary for `iterations` rounds.
/// Returns the updated vocabulary, the final projector, and the report.
pub fn apply_deconfounding(
    model: &ModelState,
    vocab: &ConceptVocabulary,
    samples: &[MemeSample],
    iterations: usize,
    fit_cfg: &FitConfig,
) -> CoreResult<(ConceptVocabulary, NullspaceProjector, DeconfoundReport)> {
    assert!(iterations >= 1, "at least one projection round");
    let mut current = vocab.clone();
    let mut rounds = Vec::with_capacity(iterations);
    let mut last_projector: Option<NullspaceProjector> = None;

    for _ in 0..iterations {
        let bank = build_counterfactual_bank(model, &current, samples)?;
        let recon = fit_reconstructor(&bank.latents, &bank.targets, fit_cfg)?;
        let mut projector = nullspace_projector(&recon.weight, DEFAULT_RANK_TOLERANCE);
        projector.fit_steps = recon.steps;

        current = project_vocabulary(&current, &projector.matrix)?;

        // Theorem check: the old reconstructor annihilates every
        // counterfactual latent rebuilt from the projected concepts.
        let rebuilt = build_counterfactual_bank(model, &current, samples)?;
        let residual_inf = recon.weight.matmul(&rebuilt.latents).max_abs();

        rounds.push(DeconfoundRound {
            rank: projector.rank,
            fit_loss: recon.final_loss,
            fit_steps: recon.steps,
            residual_inf,
            degenerate_bank: recon.degenerate,
            full_rank_warning: projector.is_full_rank(),
        });
        last_projector = Some(projector);
    }

    let projector = last_projector.expect("iterations >= 1");
    let report = DeconfoundReport {
        rank: rounds.last().expect("nonempty").rank,
        projector_checksum: checksum(&projector.matrix),
        rounds,
    };
    Ok((current, projector, report))
}

/// Replace every concept embedding `c` by `P c`.
pub fn project_vocabulary(
    vocab: &ConceptVocabulary,
    projector: &Tensor,
) -> CoreResult<ConceptVocabulary> {
    // Embeddings are rows; P is symmetric, so row * P == (P * column)^T.
    let projected = vocab.matrix().matmul(projector);
    vocab.with_matrix(&projected)
}

/// Settings for the optional head fine-tune after projection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageConfig {
    pub iterations: usize,
    pub fit: FitConfig,
    /// Train the classifier and adversarial heads for this many epochs on
    /// the projected vocabulary (0 skips the fine-tune).
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            iterations: 1,
            fit: FitConfig::default(),
            finetune_epochs: 1,
            finetune_lr: 5e-5,
            seed: 42,
        }
    }
}

/// Full stage: project the vocabulary, then fine-tune heads against it with
/// everything else frozen.
pub fn deconfound_stage(
    model: &mut ModelState,
    vocab: &ConceptVocabulary,
    samples: &[MemeSample],
    cfg: &StageConfig,
) -> CoreResult<(ConceptVocabulary, NullspaceProjector, DeconfoundReport)> {
    let (vocab_dc, projector, report) =
        apply_deconfounding(model, vocab, samples, cfg.iterations, &cfg.fit)?;
    if cfg.finetune_epochs > 0 {
        let tc = train::TrainConfig {
            epochs: cfg.finetune_epochs,
            batch_size: 32,
            lr: cfg.finetune_lr,
            seed: cfg.seed,
        };
        train::train_heads_only(model, &vocab_dc, samples, &tc)?;
    }
    Ok((vocab_dc, projector, report))
}
