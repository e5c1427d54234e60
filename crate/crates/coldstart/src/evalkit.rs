//! Evaluation and analysis toolkit: utility-weighted final scoring, Hits@K,
//! PR-AUC, feature ablation, warm/cold score-gap measurement and PCA
//! effective-rank analysis of the augmented embeddings.
//!
//! Everything here is a pure function of (params, dataset); scoring fans out
//! across query groups through the `exec` shim and reduces in group order, so
//! parallel and sequential runs agree bitwise.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::*;
use crate::model::{embed, predict, ModelConfig, ModelParams};
use crate::numgrad::DenseMatrix;
use crate::synthdata::{to_arrays, Instance, QueryGroup};

/// Evaluation-time knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Per-task utility weights combining task probabilities into one score.
    pub utility_weights: Vec<f64>,
    /// Hits@K cutoff.
    pub k: usize,
    /// Items younger than this count as cold at evaluation time.
    pub cold_age_threshold: u32,
    /// Cumulative explained-variance target for the effective rank.
    pub variance_target: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            utility_weights: vec![1.0, 1.0, 1.0],
            k: 3,
            cold_age_threshold: 28,
            variance_target: 0.9,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self, num_tasks: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be >= 1".into()));
        }
        if self.utility_weights.len() != num_tasks {
            return Err(Error::InvalidConfig(format!(
                "utility_weights has {} entries for {} tasks",
                self.utility_weights.len(),
                num_tasks
            )));
        }
        if self
            .utility_weights
            .iter()
            .any(|&u| !u.is_finite() || u < 0.0)
        {
            return Err(Error::InvalidConfig(
                "utility_weights must be finite and >= 0".into(),
            ));
        }
        if self.utility_weights.iter().all(|&u| u == 0.0) {
            return Err(Error::InvalidConfig(
                "utility_weights must not all be zero".into(),
            ));
        }
        if !(self.variance_target > 0.0 && self.variance_target <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "variance_target must lie in (0,1], got {}",
                self.variance_target
            )));
        }
        Ok(())
    }
}

/// Which instance set a metric is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricSubset {
    All,
    Cold,
}

/// Utility-weighted final score: the inner product of the task-score vector
/// with the utility weights.
pub fn final_score(task_scores: &[f64], utility: &[f64]) -> Result<f64> {
    if task_scores.len() != utility.len() {
        return Err(Error::ShapeMismatch {
            op: "final_score",
            detail: format!(
                "{} task scores vs {} utility weights",
                task_scores.len(),
                utility.len()
            ),
        });
    }
    Ok(task_scores.iter().zip(utility).map(|(&s, &u)| s * u).sum())
}

/// Task-score matrices per query group, computed in parallel over groups.
pub fn score_groups(
    params: &ModelParams,
    config: &ModelConfig,
    groups: &[QueryGroup],
) -> Result<Vec<DenseMatrix>> {
    groups
        .par_iter()
        .map(|g| {
            let refs: Vec<&Instance> = g.instances.iter().collect();
            let arrays = to_arrays(&refs)?;
            let trace = predict(&arrays.x_hist, &arrays.x_nonhist, params, config)?;
            Ok(trace.score.task_scores)
        })
        .collect()
}

/// Augmented embeddings of every instance, stacked in dataset order.
pub fn collect_augmented_embeddings(
    params: &ModelParams,
    config: &ModelConfig,
    groups: &[QueryGroup],
) -> Result<DenseMatrix> {
    let per_group: Vec<DenseMatrix> = groups
        .par_iter()
        .map(|g| {
            let refs: Vec<&Instance> = g.instances.iter().collect();
            let arrays = to_arrays(&refs)?;
            Ok(embed(&arrays.x_hist, &arrays.x_nonhist, params, config)?.augmented)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: usize = per_group.iter().map(|m| m.rows()).sum();
    let cols = per_group.first().map_or(0, |m| m.cols());
    let mut data = Vec::with_capacity(rows * cols);
    for m in &per_group {
        data.extend_from_slice(m.data());
    }
    DenseMatrix::from_vec(rows, cols, data)
}

/// Group ranking by (final score desc, item_id asc); returns instance indices.
fn rank_group(group: &QueryGroup, final_scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..group.instances.len()).collect();
    idx.sort_by(|&a, &b| {
        final_scores[b]
            .total_cmp(&final_scores[a])
            .then_with(|| group.instances[a].item_id.cmp(&group.instances[b].item_id))
    });
    idx
}

/// Hits@K over precomputed per-group final scores.
///
/// `All`: the fraction of groups whose top-k contains at least one positive
/// for the task. `Cold`: a hit requires a cold positive in the top-k, and the
/// denominator is groups that contain at least one cold positive.
pub fn hits_at_k_from_final(
    groups: &[QueryGroup],
    final_scores: &[Vec<f64>],
    task: usize,
    k: usize,
    subset: MetricSubset,
    cold_age_threshold: u32,
) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::EmptyGroupList);
    }
    if groups.len() != final_scores.len() {
        return Err(Error::ShapeMismatch {
            op: "hits_at_k",
            detail: format!(
                "{} groups vs {} score vectors",
                groups.len(),
                final_scores.len()
            ),
        });
    }
    let mut hits = 0usize;
    let mut denom = 0usize;
    for (group, scores) in groups.iter().zip(final_scores) {
        let is_cold = |inst: &Instance| inst.item_age_days < cold_age_threshold;
        let counts = |inst: &Instance| match subset {
            MetricSubset::All => inst.labels[task] == 1,
            MetricSubset::Cold => inst.labels[task] == 1 && is_cold(inst),
        };
        match subset {
            MetricSubset::All => denom += 1,
            MetricSubset::Cold => {
                if !group.instances.iter().any(counts) {
                    continue;
                }
                denom += 1;
            }
        }
        let ranked = rank_group(group, scores);
        if ranked.iter().take(k).any(|&i| counts(&group.instances[i])) {
            hits += 1;
        }
    }
    if denom == 0 {
        return Err(Error::DegenerateLabels { class: "positive" });
    }
    Ok(hits as f64 / denom as f64)
}

/// Hits@K for a task over scored groups.
pub fn hits_at_k(
    groups: &[QueryGroup],
    scores: &[DenseMatrix],
    task: usize,
    k: usize,
    subset: MetricSubset,
    eval: &EvalConfig,
) -> Result<f64> {
    let finals = groups
        .iter()
        .zip(scores)
        .map(|(g, s)| {
            (0..g.instances.len())
                .map(|r| final_score(s.row(r), &eval.utility_weights))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    hits_at_k_from_final(groups, &finals, task, k, subset, eval.cold_age_threshold)
}

/// Area under the precision-recall curve by the step method: equal scores
/// collapse into one threshold, and each threshold contributes
/// `(recall_i - recall_{i-1}) * precision_i`.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "pr_auc",
            detail: format!("{} scores vs {} labels", scores.len(), labels.len()),
        });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::DegenerateLabels { class: "positive" });
    }
    if positives == labels.len() {
        return Err(Error::DegenerateLabels { class: "negative" });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut auc = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < idx.len() {
        // advance over the tie block
        let threshold = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == threshold {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        auc += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(auc)
}

/// Per-task PR-AUC change when the named feature groups are replaced by their
/// training-set means on the evaluation data. More negative = more important.
pub fn ablate_feature_delta(
    params: &ModelParams,
    config: &ModelConfig,
    eval_groups: &[QueryGroup],
    train_groups: &[QueryGroup],
    group_names: &[&str],
) -> Result<Vec<f64>> {
    let eval_refs: Vec<&Instance> = eval_groups.iter().flat_map(|g| &g.instances).collect();
    let train_refs: Vec<&Instance> = train_groups.iter().flat_map(|g| &g.instances).collect();
    let eval_arrays = to_arrays(&eval_refs)?;
    let train_arrays = to_arrays(&train_refs)?;

    let mut ablated_hist = eval_arrays.x_hist.clone();
    let mut ablated_nonhist = eval_arrays.x_nonhist.clone();
    for name in group_names {
        let (is_hist, start, end) = config.group_range(name)?;
        let (train_block, target) = if is_hist {
            (&train_arrays.x_hist, &mut ablated_hist)
        } else {
            (&train_arrays.x_nonhist, &mut ablated_nonhist)
        };
        let n = train_block.rows() as f64;
        let sums = train_block.col_sums();
        for c in start..end {
            let mean = sums[c] / n;
            for r in 0..target.rows() {
                target.set(r, c, mean);
            }
        }
    }

    let full = predict(&eval_arrays.x_hist, &eval_arrays.x_nonhist, params, config)?;
    let ablated = predict(&ablated_hist, &ablated_nonhist, params, config)?;

    let mut deltas = Vec::with_capacity(config.num_tasks);
    for t in 0..config.num_tasks {
        let labels: Vec<bool> = eval_refs.iter().map(|inst| inst.labels[t] == 1).collect();
        let full_scores: Vec<f64> = (0..eval_refs.len())
            .map(|r| full.task_scores().get(r, t))
            .collect();
        let ablated_scores: Vec<f64> = (0..eval_refs.len())
            .map(|r| ablated.task_scores().get(r, t))
            .collect();
        deltas.push(pr_auc(&ablated_scores, &labels)? - pr_auc(&full_scores, &labels)?);
    }
    Ok(deltas)
}

/// Relative warm-vs-cold mean-score gaps for one task, split by label polarity.
/// `None` marks an undefined cell (an empty warm or cold population).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreGap {
    pub positive: Option<f64>,
    pub negative: Option<f64>,
}

/// `gap = (mean score over warm - mean score over cold) / mean score over warm`,
/// per task and per label polarity, over the given groups.
pub fn score_gap_report(
    params: &ModelParams,
    config: &ModelConfig,
    groups: &[QueryGroup],
    cold_age_threshold: u32,
) -> Result<Vec<ScoreGap>> {
    let scores = score_groups(params, config, groups)?;
    let instances: Vec<&Instance> = groups.iter().flat_map(|g| &g.instances).collect();
    let flat: Vec<f64> = scores
        .iter()
        .flat_map(|m| m.data().iter().copied())
        .collect();
    let m = config.num_tasks;
    let score_at = |i: usize, t: usize| flat[i * m + t];

    let mut gaps = Vec::with_capacity(m);
    for t in 0..m {
        let cell = |want_positive: bool| -> Option<f64> {
            let mut warm = (0.0, 0usize);
            let mut cold = (0.0, 0usize);
            for (i, inst) in instances.iter().enumerate() {
                if (inst.labels[t] == 1) != want_positive {
                    continue;
                }
                let acc = if inst.item_age_days < cold_age_threshold {
                    &mut cold
                } else {
                    &mut warm
                };
                acc.0 += score_at(i, t);
                acc.1 += 1;
            }
            if warm.1 == 0 || cold.1 == 0 {
                return None;
            }
            let mean_warm = warm.0 / warm.1 as f64;
            let mean_cold = cold.0 / cold.1 as f64;
            Some((mean_warm - mean_cold) / mean_warm)
        };
        gaps.push(ScoreGap {
            positive: cell(true),
            negative: cell(false),
        });
    }
    Ok(gaps)
}

/// PCA spectrum of a set of embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    /// Explained-variance ratios, descending; sums to 1 unless degenerate.
    pub spectrum: Vec<f64>,
    /// Components needed to reach the variance target.
    pub effective_rank: usize,
    /// Zero-variance input: spectrum is all zeros and the rank is 0.
    pub degenerate: bool,
}

/// Centers the embeddings, eigendecomposes the covariance and reports the
/// normalized spectrum plus the effective rank at `variance_target`.
pub fn pca_effective_rank(embeddings: &DenseMatrix, variance_target: f64) -> Result<PcaResult> {
    let n = embeddings.rows();
    let d = embeddings.cols();
    if n < 2 {
        return Err(Error::InvalidConfig(format!(
            "pca needs at least 2 samples, got {n}"
        )));
    }
    if !(variance_target > 0.0 && variance_target <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "variance_target must lie in (0,1], got {variance_target}"
        )));
    }
    let means = {
        let sums = embeddings.col_sums();
        sums.into_iter().map(|s| s / n as f64).collect::<Vec<f64>>()
    };
    let mut centered = embeddings.clone();
    for r in 0..n {
        for (v, &mu) in centered.row_mut(r).iter_mut().zip(&means) {
            *v -= mu;
        }
    }
    let cov = centered
        .matmul_at_b(&centered)?
        .scale(1.0 / (n as f64 - 1.0));
    let sym = nalgebra::DMatrix::from_row_slice(d, d, cov.data());
    let mut eigenvalues: Vec<f64> = sym
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|&v| v.max(0.0))
        .collect();
    eigenvalues.sort_by(|a, b| b.total_cmp(a));
    let trace: f64 = eigenvalues.iter().sum();
    if trace <= f64::EPSILON {
        return Ok(PcaResult {
            spectrum: vec![0.0; d],
            effective_rank: 0,
            degenerate: true,
        });
    }
    let spectrum: Vec<f64> = eigenvalues.iter().map(|&v| v / trace).collect();
    let mut cumulative = 0.0;
    let mut effective_rank = spectrum.len();
    for (i, &ratio) in spectrum.iter().enumerate() {
        cumulative += ratio;
        if cumulative >= variance_target {
            effective_rank = i + 1;
            break;
        }
    }
    Ok(PcaResult {
        spectrum,
        effective_rank,
        degenerate: false,
    })
}

/// Per-task metric computed over the full set and the cold subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetric {
    pub all: Option<f64>,
    pub cold: Option<f64>,
}

/// Everything the evaluation stage reports for one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Per-task Hits@K.
    pub hits_at_k: Vec<SplitMetric>,
    /// Per-task PR-AUC.
    pub pr_auc: Vec<SplitMetric>,
    /// Per-task warm/cold score gaps by label polarity.
    pub score_gaps: Vec<ScoreGap>,
    /// Mean nonhist/hist gradient-norm ratio over training, when available.
    pub grad_ratio_mean: Option<f64>,
    pub pca_spectrum: Vec<f64>,
    pub effective_rank: usize,
}

/// Degenerate populations (no positives/negatives, no qualifying groups) are
/// reported as undefined cells; real failures propagate.
fn metric_or_undefined(result: Result<f64>) -> Result<Option<f64>> {
    match result {
        Ok(v) => Ok(Some(v)),
        Err(Error::DegenerateLabels { .. }) | Err(Error::EmptyGroupList) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Computes the full report for one model over an evaluation split.
pub fn compute_metrics(
    params: &ModelParams,
    config: &ModelConfig,
    eval: &EvalConfig,
    groups: &[QueryGroup],
    grad_ratio_mean: Option<f64>,
) -> Result<MetricsReport> {
    eval.validate(config.num_tasks)?;
    if groups.is_empty() {
        return Err(Error::EmptyGroupList);
    }
    let scores = score_groups(params, config, groups)?;
    let instances: Vec<&Instance> = groups.iter().flat_map(|g| &g.instances).collect();
    let m = config.num_tasks;
    let flat: Vec<f64> = scores
        .iter()
        .flat_map(|s| s.data().iter().copied())
        .collect();

    let mut hits = Vec::with_capacity(m);
    let mut aucs = Vec::with_capacity(m);
    for t in 0..m {
        hits.push(SplitMetric {
            all: metric_or_undefined(hits_at_k(
                groups,
                &scores,
                t,
                eval.k,
                MetricSubset::All,
                eval,
            ))?,
            cold: metric_or_undefined(hits_at_k(
                groups,
                &scores,
                t,
                eval.k,
                MetricSubset::Cold,
                eval,
            ))?,
        });

        let task_scores: Vec<f64> = (0..instances.len()).map(|i| flat[i * m + t]).collect();
        let labels: Vec<bool> = instances.iter().map(|inst| inst.labels[t] == 1).collect();
        let cold_idx: Vec<usize> = (0..instances.len())
            .filter(|&i| instances[i].item_age_days < eval.cold_age_threshold)
            .collect();
        let cold_scores: Vec<f64> = cold_idx.iter().map(|&i| task_scores[i]).collect();
        let cold_labels: Vec<bool> = cold_idx.iter().map(|&i| labels[i]).collect();
        aucs.push(SplitMetric {
            all: metric_or_undefined(pr_auc(&task_scores, &labels))?,
            cold: metric_or_undefined(pr_auc(&cold_scores, &cold_labels))?,
        });
    }

    let score_gaps = score_gap_report(params, config, groups, eval.cold_age_threshold)?;
    let embeddings = collect_augmented_embeddings(params, config, groups)?;
    let pca = pca_effective_rank(&embeddings, eval.variance_target)?;

    Ok(MetricsReport {
        hits_at_k: hits,
        pr_auc: aucs,
        score_gaps,
        grad_ratio_mean,
        pca_spectrum: pca.spectrum,
        effective_rank: pca.effective_rank,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

pub fn write_pca_spectrum_csv(path: impl AsRef<Path>, spectrum: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    writeln!(w, "component,explained_variance_ratio,cumulative").map_err(|e| Error::io(path, e))?;
    let mut cumulative = 0.0;
    for (i, &v) in spectrum.iter().enumerate() {
        cumulative += v;
        writeln!(w, "{},{},{}", i + 1, v, cumulative).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_score_gaps_csv(path: impl AsRef<Path>, gaps: &[ScoreGap]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    writeln!(w, "task,polarity,gap").map_err(|e| Error::io(path, e))?;
    let fmt = |g: &Option<f64>| g.map_or(String::new(), |v| v.to_string());
    for (t, gap) in gaps.iter().enumerate() {
        writeln!(w, "{},positive,{}", t, fmt(&gap.positive)).map_err(|e| Error::io(path, e))?;
        writeln!(w, "{},negative,{}", t, fmt(&gap.negative)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_ablation_csv(path: impl AsRef<Path>, deltas: &[(String, Vec<f64>)]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    writeln!(w, "group,task,delta_pr_auc").map_err(|e| Error::io(path, e))?;
    for (group, per_task) in deltas {
        for (t, d) in per_task.iter().enumerate() {
            writeln!(w, "{},{},{}", group, t, d).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_grad_ratio_csv(path: impl AsRef<Path>, ratios: &[(usize, f64)]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    writeln!(w, "step,grad_ratio").map_err(|e| Error::io(path, e))?;
    for (step, ratio) in ratios {
        writeln!(w, "{},{}", step, ratio).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
