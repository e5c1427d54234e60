//! The multi-task ranker: feature summarization, cross-interaction layers,
//! an optional residual path for non-historical features, and MMoE task heads.
//!
//! The forward pass keeps every intermediate activation in a [`ForwardTrace`],
//! so the exact backward pass and the diagnostics (input-gradient norms,
//! embedding collection, mixup injection at the augmented embedding) all work
//! off the same structure.

mod backward;
mod forward;
mod params;

pub use backward::{backward, backward_embed, backward_score, input_gradients, BackwardResult};
pub use forward::{
    embed, interaction_forward, predict, score_embedding, EmbedTrace, ForwardTrace, ScoreTrace,
};
pub use params::{AffineParams, ModelParams};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the ranker. Feature widths are declared per group because
/// summarization learns one affine per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Historical feature group widths; their sum is `d_hist`.
    pub hist_group_dims: Vec<usize>,
    /// Non-historical feature group widths; their sum is `d_nonhist`.
    pub nonhist_group_dims: Vec<usize>,
    /// Summarization hidden size per group (historical groups first).
    pub summarization_dims: Vec<usize>,
    pub num_cross_layers: usize,
    pub mlp_dims: Vec<usize>,
    pub num_experts: usize,
    pub expert_dim: usize,
    pub num_tasks: usize,
    pub residual_enabled: bool,
    pub residual_proj_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hist_group_dims: vec![16, 16, 16],
            nonhist_group_dims: vec![16, 16],
            summarization_dims: vec![16; 5],
            num_cross_layers: 2,
            mlp_dims: vec![64, 32],
            num_experts: 4,
            expert_dim: 16,
            num_tasks: 3,
            residual_enabled: false,
            residual_proj_dim: 8,
        }
    }
}

impl ModelConfig {
    pub fn d_hist(&self) -> usize {
        self.hist_group_dims.iter().sum()
    }

    pub fn d_nonhist(&self) -> usize {
        self.nonhist_group_dims.iter().sum()
    }

    /// All group widths, historical groups first.
    pub fn group_dims(&self) -> Vec<usize> {
        let mut dims = self.hist_group_dims.clone();
        dims.extend_from_slice(&self.nonhist_group_dims);
        dims
    }

    /// Stable group names: `hist0..`, `nonhist0..`.
    pub fn group_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.hist_group_dims.len())
            .map(|i| format!("hist{i}"))
            .collect();
        names.extend((0..self.nonhist_group_dims.len()).map(|i| format!("nonhist{i}")));
        names
    }

    /// Column range of a named group within its own feature block
    /// (`x_hist` for `histN`, `x_nonhist` for `nonhistN`).
    pub fn group_range(&self, name: &str) -> Result<(bool, usize, usize)> {
        let ranges = |dims: &[usize]| {
            let mut out = Vec::with_capacity(dims.len());
            let mut start = 0;
            for &d in dims {
                out.push((start, start + d));
                start += d;
            }
            out
        };
        if let Some(idx) = name
            .strip_prefix("hist")
            .and_then(|s| s.parse::<usize>().ok())
        {
            if idx < self.hist_group_dims.len() {
                let (s, e) = ranges(&self.hist_group_dims)[idx];
                return Ok((true, s, e));
            }
        }
        if let Some(idx) = name
            .strip_prefix("nonhist")
            .and_then(|s| s.parse::<usize>().ok())
        {
            if idx < self.nonhist_group_dims.len() {
                let (s, e) = ranges(&self.nonhist_group_dims)[idx];
                return Ok((false, s, e));
            }
        }
        Err(Error::UnknownGroup(name.to_string()))
    }

    /// Width of the concatenated summarization output (the cross layers' input).
    pub fn summarization_out_dim(&self) -> usize {
        self.summarization_dims.iter().sum()
    }

    /// Width of the interaction embedding `z`.
    pub fn interaction_dim(&self) -> usize {
        self.mlp_dims
            .last()
            .copied()
            .unwrap_or_else(|| self.summarization_out_dim())
    }

    /// Width of the augmented embedding fed to the MMoE stage.
    pub fn augmented_dim(&self) -> usize {
        if self.residual_enabled {
            self.interaction_dim() + self.residual_proj_dim
        } else {
            self.interaction_dim()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::InvalidConfig(format!("{name} must be >= 1")))
            } else {
                Ok(())
            }
        };
        if self.hist_group_dims.is_empty() || self.nonhist_group_dims.is_empty() {
            return Err(Error::InvalidConfig(
                "at least one historical and one non-historical feature group required".into(),
            ));
        }
        for (i, &d) in self.group_dims().iter().enumerate() {
            positive(&format!("feature group {i} width"), d)?;
        }
        if self.summarization_dims.len() != self.group_dims().len() {
            return Err(Error::InvalidConfig(format!(
                "summarization_dims has {} entries for {} feature groups",
                self.summarization_dims.len(),
                self.group_dims().len()
            )));
        }
        for (i, &d) in self.summarization_dims.iter().enumerate() {
            positive(&format!("summarization_dims[{i}]"), d)?;
        }
        for (i, &d) in self.mlp_dims.iter().enumerate() {
            positive(&format!("mlp_dims[{i}]"), d)?;
        }
        positive("num_experts", self.num_experts)?;
        positive("expert_dim", self.expert_dim)?;
        positive("num_tasks", self.num_tasks)?;
        if self.residual_enabled {
            positive("residual_proj_dim", self.residual_proj_dim)?;
            if self.residual_proj_dim > self.d_nonhist() {
                return Err(Error::InvalidConfig(format!(
                    "residual_proj_dim {} exceeds d_nonhist {}",
                    self.residual_proj_dim,
                    self.d_nonhist()
                )));
            }
        }
        Ok(())
    }

    pub fn with_residual(&self, enabled: bool) -> Self {
        let mut c = self.clone();
        c.residual_enabled = enabled;
        c
    }
}

/// Deterministic parameter initialization for a validated config.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ModelParams::init(config, &mut rng))
}

/// Exact parameter count, total and per submodule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub by_submodule: BTreeMap<String, usize>,
}

pub fn count_params(config: &ModelConfig) -> Result<ParamCount> {
    config.validate()?;
    let affine = |d_in: usize, d_out: usize| d_in * d_out + d_out;
    let mut by: BTreeMap<String, usize> = BTreeMap::new();
    let summ: usize = config
        .group_dims()
        .iter()
        .zip(&config.summarization_dims)
        .map(|(&d_in, &d_out)| affine(d_in, d_out))
        .sum();
    by.insert("summarization".into(), summ);
    let s = config.summarization_out_dim();
    by.insert(
        "cross_interaction".into(),
        config.num_cross_layers * affine(s, s),
    );
    let mut mlp = 0;
    let mut d_in = s;
    for &d_out in &config.mlp_dims {
        mlp += affine(d_in, d_out);
        d_in = d_out;
    }
    by.insert("mlp".into(), mlp);
    by.insert(
        "residual_projection".into(),
        if config.residual_enabled {
            affine(config.d_nonhist(), config.residual_proj_dim)
        } else {
            0
        },
    );
    let d_aug = config.augmented_dim();
    by.insert(
        "experts".into(),
        config.num_experts * affine(d_aug, config.expert_dim),
    );
    by.insert(
        "gates".into(),
        config.num_tasks * affine(d_aug, config.num_experts),
    );
    by.insert(
        "task_heads".into(),
        config.num_tasks * affine(config.expert_dim, 1),
    );
    Ok(ParamCount {
        total: by.values().sum(),
        by_submodule: by,
    })
}

/// `count(residual on) / count(residual off) - 1` for the given architecture.
pub fn residual_overhead(config: &ModelConfig) -> Result<f64> {
    let on = count_params(&config.with_residual(true))?.total as f64;
    let off = count_params(&config.with_residual(false))?.total as f64;
    Ok(on / off - 1.0)
}
