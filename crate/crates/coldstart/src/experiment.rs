//! Experiment orchestration: run a matrix of technique subsets x seeds,
//! persist per-run artifacts, and aggregate a comparison report.
//!
//! Layout under `output_dir`:
//!
//! ```text
//! output_dir/
//!   data/train.jsonl, data/eval.jsonl   (when the spec generates data)
//!   <subset>/<seed>/params.json         (effective configs + trained params)
//!   <subset>/<seed>/diagnostics.csv
//!   <subset>/<seed>/metrics.json        (evaluate)
//!   <subset>/<seed>/*.csv               (diagnose)
//!   report.json, report.csv             (report)
//! ```
//!
//! Runs are independent and fan out through the `exec` shim; each run is
//! internally single-threaded and writes only under its own directory.
//! Every number in report.json is recomputed from the stored params, the
//! dataset and the stored diagnostics series.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{
    ablate_feature_delta, compute_metrics, write_ablation_csv, write_grad_ratio_csv,
    write_pca_spectrum_csv, write_score_gaps_csv, EvalConfig, MetricsReport,
};
use crate::exec::*;
use crate::model::{count_params, ModelConfig, ModelParams};
use crate::objectives::TrainConfig;
use crate::synthdata::{generate, read_dataset, write_dataset, Dataset, GenSpec};
use crate::trainer::{
    grad_ratio_mean, read_diagnostics_csv, train, write_diagnostics_csv, StepDiagnostics,
};

/// The four cold-start techniques a subset can enable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Technique {
    Residual,
    Scorereg,
    Mixup,
    Dropout,
}

impl Technique {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "residual" => Ok(Technique::Residual),
            "scorereg" => Ok(Technique::Scorereg),
            "mixup" => Ok(Technique::Mixup),
            "dropout" => Ok(Technique::Dropout),
            other => Err(Error::UnknownTechnique(other.to_string())),
        }
    }
}

/// One named row of the comparison matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TechniqueSubset {
    pub name: String,
    pub techniques: Vec<Technique>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum DatasetSource {
    /// Pre-generated dataset files.
    Path { train: PathBuf, eval: PathBuf },
    /// Generate from a spec into `output_dir/data/`.
    Gen(GenSpec),
}

/// A full experiment description, loadable from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub model_config: ModelConfig,
    #[serde(default)]
    pub train_config: TrainConfig,
    #[serde(default)]
    pub eval_config: EvalConfig,
    pub technique_matrix: Vec<TechniqueSubset>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed required".into()));
        }
        if self.technique_matrix.is_empty() {
            return Err(Error::InvalidConfig(
                "technique_matrix must name at least one subset".into(),
            ));
        }
        let mut names: Vec<&str> = self
            .technique_matrix
            .iter()
            .map(|s| s.name.as_str())
            .collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.technique_matrix.len() {
            return Err(Error::InvalidConfig("subset names must be unique".into()));
        }
        self.model_config.validate()?;
        self.train_config.validate()?;
        self.eval_config.validate(self.model_config.num_tasks)?;
        if let DatasetSource::Gen(spec) = &self.dataset {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn run_dir(&self, subset: &str, seed: u64) -> PathBuf {
        self.output_dir.join(subset).join(seed.to_string())
    }

    pub fn subset(&self, name: &str) -> Result<&TechniqueSubset> {
        self.technique_matrix
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::InvalidConfig(format!("subset `{name}` is not in the matrix")))
    }
}

/// Parses an experiment spec file; config problems are user errors.
pub fn load_spec(path: impl AsRef<Path>) -> Result<ExperimentSpec> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: ExperimentSpec = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    spec.validate()?;
    Ok(spec)
}

pub fn load_genspec(path: impl AsRef<Path>) -> Result<GenSpec> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: GenSpec = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    spec.validate()?;
    Ok(spec)
}

/// Training config for one subset: the technique switches are derived from the
/// subset, everything else comes from the base config.
pub fn subset_train_config(base: &TrainConfig, subset: &TechniqueSubset, seed: u64) -> TrainConfig {
    let has = |t: Technique| subset.techniques.contains(&t);
    TrainConfig {
        residual_enabled: has(Technique::Residual),
        scorereg_enabled: has(Technique::Scorereg),
        mixup_enabled: has(Technique::Mixup),
        dropout_enabled: has(Technique::Dropout),
        seed,
        ..base.clone()
    }
}

/// Resolves the dataset: reads files or generates into `output_dir/data/`.
/// Generated files are written once and reused on later invocations.
pub fn load_data(spec: &ExperimentSpec) -> Result<(Dataset, Dataset)> {
    match &spec.dataset {
        DatasetSource::Path { train, eval } => Ok((read_dataset(train)?, read_dataset(eval)?)),
        DatasetSource::Gen(gen_spec) => {
            let data_dir = spec.output_dir.join("data");
            let train_path = data_dir.join("train.jsonl");
            let eval_path = data_dir.join("eval.jsonl");
            let genspec_path = data_dir.join("genspec.json");
            // reuse only when the stored files came from this exact spec
            if train_path.exists() && eval_path.exists() && genspec_path.exists() {
                let stored =
                    fs::read_to_string(&genspec_path).map_err(|e| Error::io(&genspec_path, e))?;
                if serde_json::from_str::<GenSpec>(&stored).ok().as_ref() == Some(gen_spec) {
                    return Ok((read_dataset(&train_path)?, read_dataset(&eval_path)?));
                }
            }
            fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;
            let generated = generate(gen_spec)?;
            write_dataset(&train_path, &generated.train)?;
            write_dataset(&eval_path, &generated.eval)?;
            fs::write(&genspec_path, serde_json::to_string_pretty(gen_spec)?)
                .map_err(|e| Error::io(&genspec_path, e))?;
            Ok((generated.train, generated.eval))
        }
    }
}

/// Effective per-run configuration plus the trained weights, as persisted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub subset: String,
    pub seed: u64,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub params: ModelParams,
}

/// The (subset, seed) pairs selected by the optional filters, in spec order.
pub fn select_runs<'a>(
    spec: &'a ExperimentSpec,
    subsets: Option<&[String]>,
    seeds: Option<&[u64]>,
) -> Result<Vec<(&'a TechniqueSubset, u64)>> {
    let mut chosen_subsets: Vec<&TechniqueSubset> = match subsets {
        Some(names) => names
            .iter()
            .map(|n| spec.subset(n))
            .collect::<Result<Vec<_>>>()?,
        None => spec.technique_matrix.iter().collect(),
    };
    // repeated filters must not schedule a run (and its writes) twice
    let mut seen = std::collections::HashSet::new();
    chosen_subsets.retain(|s| seen.insert(s.name.clone()));
    let mut chosen_seeds: Vec<u64> = match seeds {
        Some(s) => {
            for seed in s {
                if !spec.seeds.contains(seed) {
                    return Err(Error::InvalidConfig(format!(
                        "seed {seed} is not in the experiment's seed list"
                    )));
                }
            }
            s.to_vec()
        }
        None => spec.seeds.clone(),
    };
    let mut seen_seeds = std::collections::HashSet::new();
    chosen_seeds.retain(|s| seen_seeds.insert(*s));
    let mut runs = Vec::with_capacity(chosen_subsets.len() * chosen_seeds.len());
    for subset in &chosen_subsets {
        for &seed in &chosen_seeds {
            runs.push((*subset, seed));
        }
    }
    Ok(runs)
}

/// Trains every selected (subset, seed) pair, fanned out in parallel, and
/// writes `params.json` and `diagnostics.csv` under each run directory.
pub fn run_training(
    spec: &ExperimentSpec,
    subsets: Option<&[String]>,
    seeds: Option<&[u64]>,
) -> Result<Vec<RunArtifact>> {
    spec.validate()?;
    let (train_data, _) = load_data(spec)?;
    let runs = select_runs(spec, subsets, seeds)?;
    runs.par_iter()
        .map(|(subset, seed)| {
            let train_config = subset_train_config(&spec.train_config, subset, *seed);
            let model_config = spec
                .model_config
                .with_residual(train_config.residual_enabled);
            let output = train(&train_data, &spec.model_config, &train_config).map_err(|e| {
                Error::RunFailed {
                    run: format!("{}/{seed}", subset.name),
                    source: Box::new(e),
                }
            })?;
            let dir = spec.run_dir(&subset.name, *seed);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let artifact = RunArtifact {
                subset: subset.name.clone(),
                seed: *seed,
                model_config,
                train_config,
                params: output.params,
            };
            let params_path = dir.join("params.json");
            fs::write(&params_path, serde_json::to_string(&artifact)?)
                .map_err(|e| Error::io(&params_path, e))?;
            write_diagnostics_csv(dir.join("diagnostics.csv"), &output.diagnostics)?;
            Ok(artifact)
        })
        .collect()
}

pub fn load_artifact(spec: &ExperimentSpec, subset: &str, seed: u64) -> Result<RunArtifact> {
    let path = spec.run_dir(subset, seed).join("params.json");
    if !path.exists() {
        return Err(Error::MissingRun(format!("{subset}/{seed}")));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let artifact: RunArtifact = serde_json::from_str(&text)?;
    artifact.params.validate_shapes(&artifact.model_config)?;
    Ok(artifact)
}

pub fn load_run_diagnostics(
    spec: &ExperimentSpec,
    subset: &str,
    seed: u64,
) -> Result<Vec<StepDiagnostics>> {
    let path = spec.run_dir(subset, seed).join("diagnostics.csv");
    if !path.exists() {
        return Err(Error::MissingRun(format!("{subset}/{seed}")));
    }
    read_diagnostics_csv(path)
}

/// Metrics for one stored run, recomputed from params + dataset.
pub fn evaluate_run(
    spec: &ExperimentSpec,
    eval_data: &Dataset,
    subset: &str,
    seed: u64,
) -> Result<MetricsReport> {
    let artifact = load_artifact(spec, subset, seed)?;
    let diagnostics = load_run_diagnostics(spec, subset, seed)?;
    compute_metrics(
        &artifact.params,
        &artifact.model_config,
        &spec.eval_config,
        &eval_data.groups,
        grad_ratio_mean(&diagnostics),
    )
}

/// Evaluates the selected runs and writes `metrics.json` per run.
pub fn run_evaluation(
    spec: &ExperimentSpec,
    subsets: Option<&[String]>,
    seeds: Option<&[u64]>,
) -> Result<()> {
    spec.validate()?;
    let (_, eval_data) = load_data(spec)?;
    let runs = select_runs(spec, subsets, seeds)?;
    runs.par_iter()
        .map(|(subset, seed)| {
            let report = evaluate_run(spec, &eval_data, &subset.name, *seed)?;
            let path = spec.run_dir(&subset.name, *seed).join("metrics.json");
            fs::write(&path, serde_json::to_string_pretty(&report)?)
                .map_err(|e| Error::io(&path, e))?;
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;
    Ok(())
}

/// Runs the four diagnostic analyses for the selected runs and writes the
/// plot-ready CSVs (`ablation_deltas.csv`, `grad_ratio.csv`, `score_gaps.csv`,
/// `pca_spectrum.csv`) per run.
pub fn run_diagnose(
    spec: &ExperimentSpec,
    subsets: Option<&[String]>,
    seeds: Option<&[u64]>,
) -> Result<()> {
    spec.validate()?;
    let (train_data, eval_data) = load_data(spec)?;
    let runs = select_runs(spec, subsets, seeds)?;
    runs.par_iter()
        .map(|(subset, seed)| {
            let artifact = load_artifact(spec, &subset.name, *seed)?;
            let dir = spec.run_dir(&subset.name, *seed);

            // feature ablation
            let names = artifact.model_config.group_names();
            let mut deltas = Vec::with_capacity(names.len());
            for name in &names {
                let d = ablate_feature_delta(
                    &artifact.params,
                    &artifact.model_config,
                    &eval_data.groups,
                    &train_data.groups,
                    &[name.as_str()],
                )?;
                deltas.push((name.clone(), d));
            }
            write_ablation_csv(dir.join("ablation_deltas.csv"), &deltas)?;

            // gradient-norm ratio series
            let diagnostics = load_run_diagnostics(spec, &subset.name, *seed)?;
            let ratios: Vec<(usize, f64)> = diagnostics
                .iter()
                .filter(|d| d.grad_norm_hist > 0.0)
                .map(|d| (d.step, d.grad_norm_nonhist / d.grad_norm_hist))
                .collect();
            write_grad_ratio_csv(dir.join("grad_ratio.csv"), &ratios)?;

            // warm/cold score gaps
            let gaps = crate::evalkit::score_gap_report(
                &artifact.params,
                &artifact.model_config,
                &eval_data.groups,
                spec.eval_config.cold_age_threshold,
            )?;
            write_score_gaps_csv(dir.join("score_gaps.csv"), &gaps)?;

            // embedding spectrum
            let embeddings = crate::evalkit::collect_augmented_embeddings(
                &artifact.params,
                &artifact.model_config,
                &eval_data.groups,
            )?;
            let pca =
                crate::evalkit::pca_effective_rank(&embeddings, spec.eval_config.variance_target)?;
            write_pca_spectrum_csv(dir.join("pca_spectrum.csv"), &pca.spectrum)?;
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;
    Ok(())
}

/// Mean, sample stddev and the per-seed values (in seed order) of one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub stddev: f64,
    pub per_seed: Vec<f64>,
}

impl Aggregate {
    fn from_values(values: Vec<f64>) -> Option<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stddev = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(Self {
            mean,
            stddev,
            per_seed: values,
        })
    }
}

/// Relative lifts (%) against the baseline subset's means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lifts {
    pub hits_at_k_cold_pct: Option<f64>,
    pub hits_at_k_all_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    pub name: String,
    pub techniques: Vec<Technique>,
    pub param_count: usize,
    /// Percent parameter increase over the baseline subset's model.
    pub param_increase_pct: f64,
    /// Task-mean Hits@K on the cold subset.
    pub hits_at_k_cold: Option<Aggregate>,
    pub hits_at_k_all: Option<Aggregate>,
    pub pr_auc_all: Option<Aggregate>,
    pub pr_auc_cold: Option<Aggregate>,
    /// Task-mean positive-label warm/cold score gap.
    pub score_gap_positive: Option<Aggregate>,
    pub grad_ratio_mean: Option<Aggregate>,
    pub effective_rank: Option<Aggregate>,
    pub lifts_vs_baseline: Lifts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingRun {
    pub subset: String,
    pub seed: u64,
}

/// The consolidated experiment report (`report.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub baseline_subset: String,
    pub seeds: Vec<u64>,
    pub subsets: Vec<SubsetReport>,
    /// Runs without stored outputs; their seeds are excluded from aggregates.
    pub missing: Vec<MissingRun>,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

fn task_mean(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().filter_map(|v| *v).collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Aggregates all stored runs into the consolidated report. Missing runs are
/// listed explicitly and skipped rather than failing the whole report.
pub fn build_report(spec: &ExperimentSpec) -> Result<Report> {
    spec.validate()?;
    let (_, eval_data) = load_data(spec)?;
    let baseline_subset = spec
        .technique_matrix
        .iter()
        .find(|s| s.techniques.is_empty())
        .or(spec.technique_matrix.first())
        .expect("validated non-empty matrix")
        .name
        .clone();

    // (subset index, seed) -> metrics, in parallel
    let runs = select_runs(spec, None, None)?;
    let results: Vec<(String, u64, Result<MetricsReport>)> = runs
        .par_iter()
        .map(|(subset, seed)| {
            let metrics = evaluate_run(spec, &eval_data, &subset.name, *seed);
            (subset.name.clone(), *seed, metrics)
        })
        .collect();

    let mut missing = Vec::new();
    let mut subset_reports = Vec::with_capacity(spec.technique_matrix.len());

    let baseline_count = {
        let subset = spec.subset(&baseline_subset)?;
        let cfg = spec
            .model_config
            .with_residual(subset.techniques.contains(&Technique::Residual));
        count_params(&cfg)?.total
    };

    // First pass: collect per-subset aggregates.
    struct Collected {
        name: String,
        techniques: Vec<Technique>,
        param_count: usize,
        hits_cold: Option<Aggregate>,
        hits_all: Option<Aggregate>,
        pr_all: Option<Aggregate>,
        pr_cold: Option<Aggregate>,
        gap_pos: Option<Aggregate>,
        grad_ratio: Option<Aggregate>,
        rank: Option<Aggregate>,
    }
    let mut collected = Vec::new();
    for subset in &spec.technique_matrix {
        let mut hits_cold = Vec::new();
        let mut hits_all = Vec::new();
        let mut pr_all = Vec::new();
        let mut pr_cold = Vec::new();
        let mut gap_pos = Vec::new();
        let mut grad_ratio = Vec::new();
        let mut rank = Vec::new();
        for &seed in &spec.seeds {
            let metrics = results
                .iter()
                .find(|(name, s, _)| *name == subset.name && *s == seed)
                .map(|(_, _, m)| m)
                .expect("every selected run exists in results");
            match metrics {
                Ok(m) => {
                    if let Some(v) =
                        task_mean(&m.hits_at_k.iter().map(|h| h.cold).collect::<Vec<_>>())
                    {
                        hits_cold.push(v);
                    }
                    if let Some(v) =
                        task_mean(&m.hits_at_k.iter().map(|h| h.all).collect::<Vec<_>>())
                    {
                        hits_all.push(v);
                    }
                    if let Some(v) = task_mean(&m.pr_auc.iter().map(|p| p.all).collect::<Vec<_>>())
                    {
                        pr_all.push(v);
                    }
                    if let Some(v) = task_mean(&m.pr_auc.iter().map(|p| p.cold).collect::<Vec<_>>())
                    {
                        pr_cold.push(v);
                    }
                    if let Some(v) =
                        task_mean(&m.score_gaps.iter().map(|g| g.positive).collect::<Vec<_>>())
                    {
                        gap_pos.push(v);
                    }
                    if let Some(v) = m.grad_ratio_mean {
                        grad_ratio.push(v);
                    }
                    rank.push(m.effective_rank as f64);
                }
                Err(Error::MissingRun(_)) => missing.push(MissingRun {
                    subset: subset.name.clone(),
                    seed,
                }),
                Err(e) => {
                    return Err(Error::RunFailed {
                        run: format!("{}/{seed}", subset.name),
                        source: Box::new(Error::Runtime(e.to_string())),
                    })
                }
            }
        }
        let cfg = spec
            .model_config
            .with_residual(subset.techniques.contains(&Technique::Residual));
        collected.push(Collected {
            name: subset.name.clone(),
            techniques: subset.techniques.clone(),
            param_count: count_params(&cfg)?.total,
            hits_cold: Aggregate::from_values(hits_cold),
            hits_all: Aggregate::from_values(hits_all),
            pr_all: Aggregate::from_values(pr_all),
            pr_cold: Aggregate::from_values(pr_cold),
            gap_pos: Aggregate::from_values(gap_pos),
            grad_ratio: Aggregate::from_values(grad_ratio),
            rank: Aggregate::from_values(rank),
        });
    }

    let baseline_hits_cold = collected
        .iter()
        .find(|c| c.name == baseline_subset)
        .and_then(|c| c.hits_cold.as_ref().map(|a| a.mean));
    let baseline_hits_all = collected
        .iter()
        .find(|c| c.name == baseline_subset)
        .and_then(|c| c.hits_all.as_ref().map(|a| a.mean));

    for c in collected {
        let lift = |ours: &Option<Aggregate>, base: Option<f64>| -> Option<f64> {
            match (ours, base) {
                (Some(a), Some(b)) if b != 0.0 => Some((a.mean - b) / b * 100.0),
                _ => None,
            }
        };
        let lifts = Lifts {
            hits_at_k_cold_pct: lift(&c.hits_cold, baseline_hits_cold),
            hits_at_k_all_pct: lift(&c.hits_all, baseline_hits_all),
        };
        subset_reports.push(SubsetReport {
            name: c.name,
            techniques: c.techniques,
            param_count: c.param_count,
            param_increase_pct: (c.param_count as f64 / baseline_count as f64 - 1.0) * 100.0,
            hits_at_k_cold: c.hits_cold,
            hits_at_k_all: c.hits_all,
            pr_auc_all: c.pr_all,
            pr_auc_cold: c.pr_cold,
            score_gap_positive: c.gap_pos,
            grad_ratio_mean: c.grad_ratio,
            effective_rank: c.rank,
            lifts_vs_baseline: lifts,
        });
    }

    Ok(Report {
        schema_version: REPORT_SCHEMA_VERSION,
        baseline_subset,
        seeds: spec.seeds.clone(),
        subsets: subset_reports,
        missing,
    })
}

/// Writes `report.json` (and a flat `report.csv`) under the output directory.
pub fn write_report(spec: &ExperimentSpec, report: &Report) -> Result<PathBuf> {
    fs::create_dir_all(&spec.output_dir).map_err(|e| Error::io(&spec.output_dir, e))?;
    let json_path = spec.output_dir.join("report.json");
    fs::write(&json_path, serde_json::to_string_pretty(report)?)
        .map_err(|e| Error::io(&json_path, e))?;

    let csv_path = spec.output_dir.join("report.csv");
    let mut lines = vec![
        "subset,param_count,param_increase_pct,hits_cold_mean,hits_cold_std,hits_all_mean,\
         hits_all_std,pr_auc_all_mean,pr_auc_cold_mean,score_gap_positive_mean,grad_ratio_mean,\
         effective_rank_mean,lift_hits_cold_pct,lift_hits_all_pct"
            .to_string(),
    ];
    let fmt = |a: &Option<Aggregate>, f: fn(&Aggregate) -> f64| {
        a.as_ref().map_or(String::new(), |v| f(v).to_string())
    };
    let fmt_opt = |o: &Option<f64>| o.map_or(String::new(), |v| v.to_string());
    for s in &report.subsets {
        lines.push(format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.name,
            s.param_count,
            s.param_increase_pct,
            fmt(&s.hits_at_k_cold, |a| a.mean),
            fmt(&s.hits_at_k_cold, |a| a.stddev),
            fmt(&s.hits_at_k_all, |a| a.mean),
            fmt(&s.hits_at_k_all, |a| a.stddev),
            fmt(&s.pr_auc_all, |a| a.mean),
            fmt(&s.pr_auc_cold, |a| a.mean),
            fmt(&s.score_gap_positive, |a| a.mean),
            fmt(&s.grad_ratio_mean, |a| a.mean),
            fmt(&s.effective_rank, |a| a.mean),
            fmt_opt(&s.lifts_vs_baseline.hits_at_k_cold_pct),
            fmt_opt(&s.lifts_vs_baseline.hits_at_k_all_pct),
        ));
    }
    fs::write(&csv_path, lines.join("\n") + "\n").map_err(|e| Error::io(&csv_path, e))?;
    Ok(json_path)
}

/// The shipped default experiment: the full technique lattice (each single
/// technique, each pair of the three proposed ones, all three, plus the
/// dropout baseline) over five seeds, on the default synthetic benchmark.
pub fn default_experiment(output_dir: PathBuf) -> ExperimentSpec {
    let subset = |name: &str, techniques: Vec<Technique>| TechniqueSubset {
        name: name.to_string(),
        techniques,
    };
    use Technique::*;
    ExperimentSpec {
        dataset: DatasetSource::Gen(GenSpec::default()),
        model_config: ModelConfig::default(),
        train_config: TrainConfig {
            batch_size: 128,
            // the debias weight needs to be stronger on this benchmark than
            // the production value to collapse the warm/cold score gap
            lambda_mmd: 1.0,
            ..Default::default()
        },
        eval_config: EvalConfig::default(),
        technique_matrix: vec![
            subset("baseline", vec![]),
            subset("dropout", vec![Dropout]),
            subset("residual", vec![Residual]),
            subset("scorereg", vec![Scorereg]),
            subset("mixup", vec![Mixup]),
            subset("residual_scorereg", vec![Residual, Scorereg]),
            subset("residual_mixup", vec![Residual, Mixup]),
            subset("scorereg_mixup", vec![Scorereg, Mixup]),
            subset("all_three", vec![Residual, Scorereg, Mixup]),
        ],
        seeds: vec![1, 2, 3, 4, 5],
        output_dir,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(dir: &Path) -> ExperimentSpec {
        let mut spec = default_experiment(dir.to_path_buf());
        spec.dataset = DatasetSource::Gen(GenSpec {
            num_queries: 30,
            items_per_query: 6,
            ..Default::default()
        });
        spec.model_config = ModelConfig {
            hist_group_dims: vec![24, 24],
            nonhist_group_dims: vec![24, 8],
            summarization_dims: vec![8; 4],
            num_cross_layers: 1,
            mlp_dims: vec![16, 8],
            num_experts: 2,
            expert_dim: 8,
            num_tasks: 3,
            residual_enabled: false,
            residual_proj_dim: 4,
        };
        spec.train_config.batch_size = 32;
        spec.train_config.max_steps = Some(10);
        spec.technique_matrix = vec![
            TechniqueSubset {
                name: "baseline".into(),
                techniques: vec![],
            },
            TechniqueSubset {
                name: "all_three".into(),
                techniques: vec![Technique::Residual, Technique::Scorereg, Technique::Mixup],
            },
        ];
        spec.seeds = vec![1, 2];
        spec
    }

    #[test]
    fn training_writes_run_artifacts_for_every_pair() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(dir.path());
        let artifacts = run_training(&spec, None, None).unwrap();
        assert_eq!(artifacts.len(), 4);
        for subset in ["baseline", "all_three"] {
            for seed in [1u64, 2] {
                let run = spec.run_dir(subset, seed);
                assert!(run.join("params.json").exists());
                assert!(run.join("diagnostics.csv").exists());
            }
        }
    }

    #[test]
    fn report_self_lift_is_exactly_zero_and_schema_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(dir.path());
        run_training(&spec, None, None).unwrap();
        let report = build_report(&spec).unwrap();
        assert!(report.missing.is_empty());
        let baseline = &report.subsets[0];
        assert_eq!(baseline.name, "baseline");
        assert_eq!(baseline.lifts_vs_baseline.hits_at_k_cold_pct, Some(0.0));
        assert_eq!(baseline.lifts_vs_baseline.hits_at_k_all_pct, Some(0.0));
        assert_eq!(baseline.param_increase_pct, 0.0);

        let path = write_report(&spec, &report).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        let parsed: Report = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed, report);
    }

    #[test]
    fn missing_runs_are_reported_as_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(dir.path());
        run_training(&spec, Some(&["baseline".to_string()]), None).unwrap();
        let report = build_report(&spec).unwrap();
        assert_eq!(report.missing.len(), 2);
        assert!(report.missing.iter().all(|m| m.subset == "all_three"));
        let all_three = report
            .subsets
            .iter()
            .find(|s| s.name == "all_three")
            .unwrap();
        assert!(all_three.hits_at_k_cold.is_none());
    }

    #[test]
    fn unknown_subset_filter_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(dir.path());
        let err = run_training(&spec, Some(&["bogus".to_string()]), None).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn technique_parse_rejects_unknown_names() {
        assert!(matches!(
            Technique::parse("warmup").unwrap_err(),
            Error::UnknownTechnique(_)
        ));
        assert_eq!(Technique::parse("mixup").unwrap(), Technique::Mixup);
    }

    #[test]
    fn residual_subset_param_increase_matches_count_params() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = tiny_spec(dir.path());
        spec.technique_matrix.push(TechniqueSubset {
            name: "residual".into(),
            techniques: vec![Technique::Residual],
        });
        run_training(&spec, None, None).unwrap();
        let report = build_report(&spec).unwrap();
        let residual = report
            .subsets
            .iter()
            .find(|s| s.name == "residual")
            .unwrap();
        let overhead = crate::model::residual_overhead(&spec.model_config).unwrap();
        assert!((residual.param_increase_pct - overhead * 100.0).abs() < 1e-12);
    }
}
