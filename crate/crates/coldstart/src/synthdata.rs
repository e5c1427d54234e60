//! Synthetic cold-start ranking datasets and the canonical dataset file format.
//!
//! The generator plants the three pathologies the remedies target:
//!
//! 1. True relevance is a function of the non-historical features alone
//!    (a global content direction plus a query-specific match block), but warm
//!    items also carry historical features that encode their own past
//!    relevance almost directly, so historical features are the easiest
//!    predictor. Cold items get a near-zero historical block.
//! 2. Logged (training) labels for cold positives are suppressed by
//!    `engagement_bias`; evaluation labels are drawn unbiased, which is the
//!    counterfactual a logged dataset cannot offer.
//! 3. Cold items are a minority (`cold_fraction`).
//!
//! File format: UTF-8 JSON Lines. Line 1 is a metadata object with keys
//! `{version, m, d_hist, d_nonhist, cold_age_threshold, seed}`; each following
//! line is one instance with keys `{query_id, item_id, x_hist, x_nonhist,
//! labels, item_age_days, is_cold, p_star(optional)}`. Instances of one query
//! group are contiguous.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numgrad::{affine_backward, affine_forward, sigmoid_forward, DenseMatrix};

/// Latent width of the query block and of the item block at the tail of
/// `x_nonhist`. True relevance includes their inner product, so the match
/// signal is recoverable from non-historical features only through a learned
/// multiplicative interaction.
const LATENT_DIM: usize = 4;
/// Width of the trailing `[query latent; item latent]` context block.
const CONTEXT_DIM: usize = 2 * LATENT_DIM;
/// Normalizes the match inner product to unit variance.
const MATCH_SCALE: f64 = 0.5;
/// Noise scale of the near-zero historical block on cold items.
const COLD_HIST_NOISE: f64 = 1e-3;

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// One (query, candidate) example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub query_id: u64,
    pub item_id: u64,
    pub x_hist: Vec<f64>,
    pub x_nonhist: Vec<f64>,
    pub labels: Vec<u8>,
    pub item_age_days: u32,
    pub is_cold: bool,
    /// True relevance; emitted by the generator, absent in foreign data.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_star: Option<f64>,
}

/// The candidates shown for one request.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryGroup {
    pub query_id: u64,
    pub instances: Vec<Instance>,
}

/// First line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub version: u32,
    pub m: usize,
    pub d_hist: usize,
    pub d_nonhist: usize,
    pub cold_age_threshold: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub groups: Vec<QueryGroup>,
}

impl Dataset {
    pub fn num_instances(&self) -> usize {
        self.groups.iter().map(|g| g.instances.len()).sum()
    }

    pub fn instances(&self) -> impl Iterator<Item = &Instance> {
        self.groups.iter().flat_map(|g| g.instances.iter())
    }

    pub fn num_cold(&self) -> usize {
        self.instances().filter(|i| i.is_cold).count()
    }
}

/// Generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSpec {
    /// Query groups per split (train and eval each get this many).
    pub num_queries: usize,
    pub items_per_query: usize,
    pub cold_fraction: f64,
    #[serde(rename = "m")]
    pub num_tasks: usize,
    pub d_hist: usize,
    pub d_nonhist: usize,
    /// Items younger than this many days are cold.
    pub cold_age_threshold: u32,
    /// Suppression of logged labels on cold positives, in [0,1).
    pub engagement_bias: f64,
    /// Per-task scaling of the positive rate.
    pub label_base_rates: Vec<f64>,
    /// Noise on the historical encoding of past relevance.
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            num_queries: 1200,
            items_per_query: 8,
            cold_fraction: 0.25,
            num_tasks: 3,
            d_hist: 48,
            d_nonhist: 32,
            cold_age_threshold: 28,
            engagement_bias: 0.5,
            label_base_rates: vec![1.0, 0.7, 0.4],
            noise_scale: 0.5,
            seed: 7,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 || self.items_per_query == 0 {
            return Err(Error::InvalidConfig(
                "num_queries and items_per_query must be >= 1".into(),
            ));
        }
        if !(self.cold_fraction > 0.0 && self.cold_fraction < 1.0) {
            return Err(Error::Generation(format!(
                "cold_fraction must lie in (0,1), got {}",
                self.cold_fraction
            )));
        }
        if self.num_tasks == 0 {
            return Err(Error::InvalidConfig("m must be >= 1".into()));
        }
        if self.label_base_rates.len() != self.num_tasks {
            return Err(Error::InvalidConfig(format!(
                "label_base_rates has {} entries for m = {}",
                self.label_base_rates.len(),
                self.num_tasks
            )));
        }
        if self.label_base_rates.iter().any(|&r| r <= 0.0 || r > 1.0) {
            return Err(Error::InvalidConfig(
                "label_base_rates entries must lie in (0,1]".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.engagement_bias) {
            return Err(Error::InvalidConfig(format!(
                "engagement_bias must lie in [0,1), got {}",
                self.engagement_bias
            )));
        }
        if self.noise_scale < 0.0 {
            return Err(Error::InvalidConfig("noise_scale must be >= 0".into()));
        }
        if self.d_nonhist <= CONTEXT_DIM {
            return Err(Error::InvalidConfig(format!(
                "d_nonhist must exceed the {CONTEXT_DIM}-wide context block"
            )));
        }
        if self.d_hist == 0 {
            return Err(Error::InvalidConfig("d_hist must be >= 1".into()));
        }
        if self.cold_age_threshold == 0 {
            return Err(Error::InvalidConfig(
                "cold_age_threshold must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            version: DATASET_FORMAT_VERSION,
            m: self.num_tasks,
            d_hist: self.d_hist,
            d_nonhist: self.d_nonhist,
            cold_age_threshold: self.cold_age_threshold,
            seed: self.seed,
        }
    }
}

#[derive(Debug)]
pub struct Generated {
    pub train: Dataset,
    pub eval: Dataset,
}

/// Fixed random structure shared by every instance of one generator run.
struct Structure {
    /// Global content direction (query-independent relevance signal).
    content_dir: Vec<f64>,
    /// Direction along which historical features encode past relevance.
    hist_dir: Vec<f64>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

impl Structure {
    fn draw(spec: &GenSpec, rng: &mut ChaCha8Rng) -> Self {
        let content_dim = spec.d_nonhist - CONTEXT_DIM;
        let content_scale = 1.0 / (content_dim as f64).sqrt();
        Self {
            content_dir: (0..content_dim)
                .map(|_| normal(rng) * content_scale)
                .collect(),
            hist_dir: (0..spec.d_hist).map(|_| normal(rng)).collect(),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn generate_split(
    spec: &GenSpec,
    structure: &Structure,
    rng: &mut ChaCha8Rng,
    biased_labels: bool,
    split_name: &str,
) -> Result<Vec<QueryGroup>> {
    let content_dim = spec.d_nonhist - CONTEXT_DIM;
    let mut groups = Vec::with_capacity(spec.num_queries);
    let mut item_id: u64 = 0;
    let mut saw_cold = false;
    let mut saw_warm = false;

    for q in 0..spec.num_queries {
        let query_latent: Vec<f64> = (0..LATENT_DIM).map(|_| normal(rng)).collect();
        let mut instances = Vec::with_capacity(spec.items_per_query);
        for _ in 0..spec.items_per_query {
            let content: Vec<f64> = (0..content_dim).map(|_| normal(rng)).collect();
            let item_latent: Vec<f64> = (0..LATENT_DIM).map(|_| normal(rng)).collect();

            let content_signal: f64 = structure
                .content_dir
                .iter()
                .zip(&content)
                .map(|(&w, &x)| w * x)
                .sum();
            let match_signal: f64 = query_latent
                .iter()
                .zip(&item_latent)
                .map(|(&v, &i)| v * i)
                .sum::<f64>()
                * MATCH_SCALE;
            let raw = content_signal + match_signal;
            let p_star = sigmoid(raw);

            let is_cold = rng.random_range(0.0..1.0) < spec.cold_fraction;
            saw_cold |= is_cold;
            saw_warm |= !is_cold;
            let item_age_days = if is_cold {
                rng.random_range(0..spec.cold_age_threshold)
            } else {
                rng.random_range(spec.cold_age_threshold..spec.cold_age_threshold + 338)
            };

            let x_hist: Vec<f64> = if is_cold {
                (0..spec.d_hist)
                    .map(|_| COLD_HIST_NOISE * normal(rng))
                    .collect()
            } else {
                structure
                    .hist_dir
                    .iter()
                    .map(|&u| raw * u + spec.noise_scale * normal(rng))
                    .collect()
            };

            let mut x_nonhist = content;
            x_nonhist.extend_from_slice(&query_latent);
            x_nonhist.extend_from_slice(&item_latent);

            let labels: Vec<u8> = spec
                .label_base_rates
                .iter()
                .map(|&base| {
                    let mut p = (p_star * base).clamp(0.0, 1.0);
                    if biased_labels && is_cold {
                        p *= 1.0 - spec.engagement_bias;
                    }
                    u8::from(rng.random_range(0.0..1.0) < p)
                })
                .collect();

            instances.push(Instance {
                query_id: q as u64,
                item_id,
                x_hist,
                x_nonhist,
                labels,
                item_age_days,
                is_cold,
                p_star: Some(p_star),
            });
            item_id += 1;
        }
        groups.push(QueryGroup {
            query_id: q as u64,
            instances,
        });
    }

    if !saw_cold || !saw_warm {
        return Err(Error::Generation(format!(
            "{split_name} split has no {} instances (cold_fraction {})",
            if saw_cold { "warm" } else { "cold" },
            spec.cold_fraction
        )));
    }
    Ok(groups)
}

/// Generates a train split (logged, biased labels) and an eval split
/// (unbiased labels). Deterministic under `spec.seed`.
pub fn generate(spec: &GenSpec) -> Result<Generated> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    // independent sub-streams so split sizes never perturb one another
    let structure_seed = master.random::<u64>();
    let train_seed = master.random::<u64>();
    let eval_seed = master.random::<u64>();

    let mut structure_rng = ChaCha8Rng::seed_from_u64(structure_seed);
    let structure = Structure::draw(spec, &mut structure_rng);

    let mut train_rng = ChaCha8Rng::seed_from_u64(train_seed);
    let train = generate_split(spec, &structure, &mut train_rng, true, "train")?;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(eval_seed);
    let eval = generate_split(spec, &structure, &mut eval_rng, false, "eval")?;

    Ok(Generated {
        train: Dataset {
            meta: spec.meta(),
            groups: train,
        },
        eval: Dataset {
            meta: spec.meta(),
            groups: eval,
        },
    })
}

pub fn write_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut line = serde_json::to_string(&dataset.meta)?;
    line.push('\n');
    w.write_all(line.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    for group in &dataset.groups {
        for instance in &group.instances {
            let mut line = serde_json::to_string(instance)?;
            line.push('\n');
            w.write_all(line.as_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn validate_instance(inst: &Instance, meta: &DatasetMeta, line: usize) -> Result<()> {
    let schema = |field: &str, msg: String| Error::Schema {
        field: field.to_string(),
        msg: format!("{msg} (line {line})"),
    };
    if inst.labels.len() != meta.m {
        return Err(schema(
            "labels",
            format!("expected {} labels, got {}", meta.m, inst.labels.len()),
        ));
    }
    if inst.labels.iter().any(|&l| l > 1) {
        return Err(schema("labels", "labels must be 0 or 1".into()));
    }
    if inst.x_hist.len() != meta.d_hist {
        return Err(schema(
            "x_hist",
            format!("expected {} values, got {}", meta.d_hist, inst.x_hist.len()),
        ));
    }
    if inst.x_nonhist.len() != meta.d_nonhist {
        return Err(schema(
            "x_nonhist",
            format!(
                "expected {} values, got {}",
                meta.d_nonhist,
                inst.x_nonhist.len()
            ),
        ));
    }
    if inst
        .x_hist
        .iter()
        .chain(&inst.x_nonhist)
        .any(|v| !v.is_finite())
    {
        return Err(schema("x_hist", "features must be finite".into()));
    }
    let cold_by_age = inst.item_age_days < meta.cold_age_threshold;
    if inst.is_cold != cold_by_age {
        return Err(schema(
            "is_cold",
            format!(
                "is_cold={} contradicts item_age_days={} with threshold {}",
                inst.is_cold, inst.item_age_days, meta.cold_age_threshold
            ),
        ));
    }
    Ok(())
}

/// Reads a dataset file, validating the schema. Consecutive lines sharing a
/// query_id are grouped.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let meta: DatasetMeta = match lines.next() {
        Some((_, Ok(line))) => serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: 1,
            msg: format!("metadata: {e}"),
        })?,
        Some((_, Err(e))) => return Err(Error::io(path, e)),
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: "empty file, expected a metadata line".into(),
            })
        }
    };

    let mut groups: Vec<QueryGroup> = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        validate_instance(&inst, &meta, line_no)?;
        match groups.last_mut() {
            Some(g) if g.query_id == inst.query_id => g.instances.push(inst),
            _ => groups.push(QueryGroup {
                query_id: inst.query_id,
                instances: vec![inst],
            }),
        }
    }
    Ok(Dataset { meta, groups })
}

/// Flattened feature/label views of a dataset, batch-major.
pub struct InstanceArrays {
    pub x_hist: DenseMatrix,
    pub x_nonhist: DenseMatrix,
    pub labels: DenseMatrix,
    pub cold_flags: Vec<bool>,
}

pub fn to_arrays(instances: &[&Instance]) -> Result<InstanceArrays> {
    let n = instances.len();
    if n == 0 {
        return Err(Error::EmptyGroupList);
    }
    let d_hist = instances[0].x_hist.len();
    let d_nonhist = instances[0].x_nonhist.len();
    let m = instances[0].labels.len();
    let mut xh = Vec::with_capacity(n * d_hist);
    let mut xn = Vec::with_capacity(n * d_nonhist);
    let mut y = Vec::with_capacity(n * m);
    let mut cold = Vec::with_capacity(n);
    for inst in instances {
        xh.extend_from_slice(&inst.x_hist);
        xn.extend_from_slice(&inst.x_nonhist);
        y.extend(inst.labels.iter().map(|&l| f64::from(l)));
        cold.push(inst.is_cold);
    }
    Ok(InstanceArrays {
        x_hist: DenseMatrix::from_vec(n, d_hist, xh)?,
        x_nonhist: DenseMatrix::from_vec(n, d_nonhist, xn)?,
        labels: DenseMatrix::from_vec(n, m, y)?,
        cold_flags: cold,
    })
}

/// Depth-0 probe: logistic regression (one affine + sigmoid) trained by
/// full-batch gradient descent. Returns scores on the eval features.
///
/// Used to verify the generator's informativeness asymmetry: the probe on
/// historical features should beat the one on non-historical features on warm
/// training data, while non-historical features alone stay learnable.
pub fn probe_scores(
    train_x: &DenseMatrix,
    train_y: &[f64],
    eval_x: &DenseMatrix,
    steps: usize,
    learning_rate: f64,
) -> Result<Vec<f64>> {
    if train_x.rows() != train_y.len() {
        return Err(Error::ShapeMismatch {
            op: "probe_scores",
            detail: format!(
                "{} feature rows vs {} labels",
                train_x.rows(),
                train_y.len()
            ),
        });
    }
    let d = train_x.cols();
    let n = train_x.rows();
    let mut weights = DenseMatrix::zeros(d, 1);
    let mut bias = vec![0.0];
    let y = DenseMatrix::from_vec(n, 1, train_y.to_vec())?;
    for _ in 0..steps {
        let logits = affine_forward(train_x, &weights, &bias)?;
        let probs = sigmoid_forward(&logits);
        // d(BCE)/d(logit) = (p - y) / n
        let mut upstream = DenseMatrix::zeros(n, 1);
        for r in 0..n {
            upstream.set(r, 0, (probs.get(r, 0) - y.get(r, 0)) / n as f64);
        }
        let g = affine_backward(train_x, &weights, &upstream)?;
        weights.add_assign_scaled(&g.d_weights, -learning_rate)?;
        bias[0] -= learning_rate * g.d_bias[0];
    }
    let logits = affine_forward(eval_x, &weights, &bias)?;
    Ok(sigmoid_forward(&logits).data().to_vec())
}
