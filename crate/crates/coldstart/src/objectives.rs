//! Training losses and the mixup augmentation.
//!
//! Three pieces compose the training objective:
//!
//! - per-task binary cross-entropy over the original batch,
//! - the same BCE over a mixup batch built at the augmented embedding,
//! - a score-debiasing penalty: the squared distance between the mean
//!   predicted score vectors of the warm and cold sub-batches.
//!
//! `total = bce_main + lambda_mix * bce_mix + lambda_mmd * mmd`, and every
//! component returns its exact gradient with respect to the scores it saw.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numgrad::DenseMatrix;

/// Every training hyperparameter, including the technique switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the mixed-sample BCE term.
    pub lambda_mix: f64,
    /// Weight of the warm/cold score-debiasing term.
    pub lambda_mmd: f64,
    /// Beta(alpha, alpha) concentration for mixup interpolation draws.
    pub mixup_alpha: f64,
    pub mixup_enabled: bool,
    pub scorereg_enabled: bool,
    pub residual_enabled: bool,
    pub dropout_enabled: bool,
    /// Probability of replacing an instance's historical block with the cold
    /// default (zeros); the feature-dropout baseline.
    pub feature_dropout_rate: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Dataset passes when `max_steps` is unset.
    pub epochs: usize,
    /// Hard step budget; cycles (reshuffled) epochs as needed and overrides
    /// `epochs` when set.
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_mix: 0.2,
            lambda_mmd: 0.1,
            mixup_alpha: 2.0,
            mixup_enabled: false,
            scorereg_enabled: false,
            residual_enabled: false,
            dropout_enabled: false,
            feature_dropout_rate: 0.3,
            learning_rate: 1e-3,
            batch_size: 256,
            epochs: 1,
            max_steps: Some(2000),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_mix < 0.0 || !self.lambda_mix.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "lambda_mix must be >= 0, got {}",
                self.lambda_mix
            )));
        }
        if self.lambda_mmd < 0.0 || !self.lambda_mmd.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "lambda_mmd must be >= 0, got {}",
                self.lambda_mmd
            )));
        }
        if self.mixup_alpha <= 0.0 || !self.mixup_alpha.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "mixup_alpha must be > 0, got {}",
                self.mixup_alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.feature_dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "feature_dropout_rate must be in [0,1], got {}",
                self.feature_dropout_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.mixup_enabled && self.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "batch_size must be >= 2 when mixup is enabled".into(),
            ));
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return Err(Error::InvalidConfig(
                "epochs must be >= 1 when max_steps is unset".into(),
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Loss value plus its exact gradient with respect to the scores.
#[derive(Debug, Clone)]
pub struct LossAndGrad {
    pub value: f64,
    pub grad: DenseMatrix,
}

/// Mean over batch and tasks of `-[y ln s + (1-y) ln(1-s)]`.
///
/// Scores must lie strictly inside (0,1); labels may be soft (mixup labels
/// are convex combinations in [0,1]).
pub fn bce_loss(scores: &DenseMatrix, labels: &DenseMatrix) -> Result<LossAndGrad> {
    if !scores.same_shape(labels) {
        return Err(Error::ShapeMismatch {
            op: "bce_loss",
            detail: format!(
                "scores {}x{} vs labels {}x{}",
                scores.rows(),
                scores.cols(),
                labels.rows(),
                labels.cols()
            ),
        });
    }
    let n = (scores.rows() * scores.cols()) as f64;
    let mut grad = DenseMatrix::zeros(scores.rows(), scores.cols());
    let mut value = 0.0;
    for r in 0..scores.rows() {
        for c in 0..scores.cols() {
            let s = scores.get(r, c);
            if s <= 0.0 || s >= 1.0 {
                return Err(Error::ScoreDomain {
                    value: s,
                    row: r,
                    task: c,
                });
            }
            let y = labels.get(r, c);
            value -= y * s.ln() + (1.0 - y) * (1.0 - s).ln();
            grad.set(r, c, (s - y) / (s * (1.0 - s)) / n);
        }
    }
    Ok(LossAndGrad {
        value: value / n,
        grad,
    })
}

/// Outcome of the warm/cold debiasing term for one batch.
#[derive(Debug, Clone)]
pub struct MmdLoss {
    pub value: f64,
    pub grad: DenseMatrix,
    /// True when the batch lacked a warm or a cold row; value and grad are zero.
    pub skipped: bool,
}

/// Squared l2 distance between the mean warm score vector and the mean cold
/// score vector, pooled over tasks. A batch lacking either group yields the
/// designated skipped outcome rather than an error.
pub fn mmd_loss(scores: &DenseMatrix, cold_flags: &[bool]) -> Result<MmdLoss> {
    if scores.rows() != cold_flags.len() {
        return Err(Error::ShapeMismatch {
            op: "mmd_loss",
            detail: format!(
                "scores have {} rows, cold_flags has {} entries",
                scores.rows(),
                cold_flags.len()
            ),
        });
    }
    let m = scores.cols();
    let n_cold = cold_flags.iter().filter(|&&c| c).count();
    let n_warm = cold_flags.len() - n_cold;
    if n_cold == 0 || n_warm == 0 {
        return Ok(MmdLoss {
            value: 0.0,
            grad: DenseMatrix::zeros(scores.rows(), m),
            skipped: true,
        });
    }

    let mut mean_warm = vec![0.0; m];
    let mut mean_cold = vec![0.0; m];
    for (r, &cold) in cold_flags.iter().enumerate() {
        let target = if cold { &mut mean_cold } else { &mut mean_warm };
        for (acc, &s) in target.iter_mut().zip(scores.row(r)) {
            *acc += s;
        }
    }
    for v in &mut mean_warm {
        *v /= n_warm as f64;
    }
    for v in &mut mean_cold {
        *v /= n_cold as f64;
    }
    let delta: Vec<f64> = mean_warm
        .iter()
        .zip(&mean_cold)
        .map(|(&w, &c)| w - c)
        .collect();
    let value: f64 = delta.iter().map(|d| d * d).sum();

    let mut grad = DenseMatrix::zeros(scores.rows(), m);
    for (r, &cold) in cold_flags.iter().enumerate() {
        let scale = if cold {
            -2.0 / n_cold as f64
        } else {
            2.0 / n_warm as f64
        };
        for (g, &d) in grad.row_mut(r).iter_mut().zip(&delta) {
            *g = scale * d;
        }
    }
    Ok(MmdLoss {
        value,
        grad,
        skipped: false,
    })
}

/// One mixup pairing: the partner row and the interpolation weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixupDraw {
    pub partner: usize,
    pub lambda: f64,
}

/// Draws one partner (uniform over the batch excluding self) and one
/// `lambda ~ Beta(alpha, alpha)` per row.
pub fn sample_mixup_draws(batch: usize, alpha: f64, rng: &mut impl Rng) -> Result<Vec<MixupDraw>> {
    if batch < 2 {
        return Err(Error::MixupBatchTooSmall(batch));
    }
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::InvalidConfig(format!("invalid mixup alpha {alpha}: {e}")))?;
    Ok((0..batch)
        .map(|i| {
            let k = rng.random_range(0..batch - 1);
            let partner = if k >= i { k + 1 } else { k };
            MixupDraw {
                partner,
                lambda: beta.sample(rng),
            }
        })
        .collect())
}

/// Applies fixed draws: row i becomes `lambda_i * row_i + (1-lambda_i) * row_{j(i)}`
/// with the same interpolation on the labels.
pub fn mixup_apply_draws(
    embeddings: &DenseMatrix,
    labels: &DenseMatrix,
    draws: &[MixupDraw],
) -> Result<(DenseMatrix, DenseMatrix)> {
    if embeddings.rows() != labels.rows() || embeddings.rows() != draws.len() {
        return Err(Error::ShapeMismatch {
            op: "mixup_apply",
            detail: format!(
                "embeddings {} rows, labels {} rows, draws {}",
                embeddings.rows(),
                labels.rows(),
                draws.len()
            ),
        });
    }
    let mut mixed_e = DenseMatrix::zeros(embeddings.rows(), embeddings.cols());
    let mut mixed_l = DenseMatrix::zeros(labels.rows(), labels.cols());
    for (i, draw) in draws.iter().enumerate() {
        let l = draw.lambda;
        let j = draw.partner;
        for (out, (&a, &b)) in mixed_e
            .row_mut(i)
            .iter_mut()
            .zip(embeddings.row(i).iter().zip(embeddings.row(j)))
        {
            *out = l * a + (1.0 - l) * b;
        }
        for (out, (&a, &b)) in mixed_l
            .row_mut(i)
            .iter_mut()
            .zip(labels.row(i).iter().zip(labels.row(j)))
        {
            *out = l * a + (1.0 - l) * b;
        }
    }
    Ok((mixed_e, mixed_l))
}

/// Mixup batch plus the draws that produced it (needed to route gradients
/// back to both interpolation endpoints).
#[derive(Debug, Clone)]
pub struct MixupBatch {
    pub mixed_embeddings: DenseMatrix,
    pub mixed_labels: DenseMatrix,
    pub draws: Vec<MixupDraw>,
}

/// Samples draws and interpolates. The original rows are not replaced; the
/// caller trains on both populations.
pub fn mixup_apply(
    embeddings: &DenseMatrix,
    labels: &DenseMatrix,
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<MixupBatch> {
    let draws = sample_mixup_draws(embeddings.rows(), alpha, rng)?;
    let (mixed_embeddings, mixed_labels) = mixup_apply_draws(embeddings, labels, &draws)?;
    Ok(MixupBatch {
        mixed_embeddings,
        mixed_labels,
        draws,
    })
}

/// Components of one training step's objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce_main: f64,
    pub bce_mix: f64,
    pub mmd: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(
        bce_main: f64,
        bce_mix: f64,
        mmd: f64,
        lambda_mix: f64,
        lambda_mmd: f64,
    ) -> Self {
        Self {
            bce_main,
            bce_mix,
            mmd,
            total: bce_main + lambda_mix * bce_mix + lambda_mmd * mmd,
        }
    }
}

/// The combined objective with gradients routed to both score batches.
#[derive(Debug, Clone)]
pub struct CombinedLoss {
    pub breakdown: LossBreakdown,
    /// dL/d(scores) on the original batch: BCE plus the weighted debias term.
    pub grad_scores: DenseMatrix,
    /// dL/d(scores) on the mixed batch, already weighted by `lambda_mix`.
    pub grad_scores_mixed: Option<DenseMatrix>,
    pub mmd_skipped: bool,
}

/// Combines the three terms. The debias term sees the ORIGINAL (unmixed)
/// scores only, and is computed only when score regularization is active
/// (enabled and positively weighted), so a zero-weight run is bit-identical
/// to a disabled one.
pub fn combined_loss(
    scores: &DenseMatrix,
    mixed_scores: Option<&DenseMatrix>,
    labels: &DenseMatrix,
    mixed_labels: Option<&DenseMatrix>,
    cold_flags: &[bool],
    config: &TrainConfig,
) -> Result<CombinedLoss> {
    let main = bce_loss(scores, labels)?;
    let mut grad_scores = main.grad;

    let (bce_mix, grad_scores_mixed) = if config.mixup_enabled {
        let (ms, ml) = match (mixed_scores, mixed_labels) {
            (Some(s), Some(l)) => (s, l),
            _ => {
                return Err(Error::InvalidConfig(
                    "mixup is enabled but the mixed batch is missing".into(),
                ))
            }
        };
        let mix = bce_loss(ms, ml)?;
        (mix.value, Some(mix.grad.scale(config.lambda_mix)))
    } else {
        if mixed_scores.is_some() || mixed_labels.is_some() {
            return Err(Error::InvalidConfig(
                "mixed batch supplied but mixup is disabled".into(),
            ));
        }
        (0.0, None)
    };

    let scorereg_active = config.scorereg_enabled && config.lambda_mmd > 0.0;
    let (mmd_value, mmd_skipped) = if scorereg_active {
        let mmd = mmd_loss(scores, cold_flags)?;
        if !mmd.skipped {
            grad_scores.add_assign_scaled(&mmd.grad, config.lambda_mmd)?;
        }
        (mmd.value, mmd.skipped)
    } else {
        (0.0, false)
    };

    Ok(CombinedLoss {
        breakdown: LossBreakdown::compose(
            main.value,
            bce_mix,
            mmd_value,
            config.lambda_mix,
            config.lambda_mmd,
        ),
        grad_scores,
        grad_scores_mixed,
        mmd_skipped,
    })
}
