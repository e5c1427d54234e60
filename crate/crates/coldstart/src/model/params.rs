//! Parameter containers for the ranker.
//!
//! `ModelParams` doubles as the gradient container: gradients of a parameter
//! set have exactly the same shapes, so the optimizer and the
//! finite-difference harness can walk both through the same flat view.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numgrad::DenseMatrix;

use super::ModelConfig;

/// One affine transform: `weights` is `d_in x d_out`, `bias` has length `d_out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

impl AffineParams {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weights: DenseMatrix::zeros(d_in, d_out),
            bias: vec![0.0; d_out],
        }
    }

    /// Xavier/Glorot uniform weights, zero biases.
    pub fn xavier(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (d_in + d_out) as f64).sqrt();
        let data = (0..d_in * d_out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self {
            weights: DenseMatrix::from_vec(d_in, d_out, data).expect("xavier draw is finite"),
            bias: vec![0.0; d_out],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.data().len() + self.bias.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.weights.rows(), self.weights.cols())
    }
}

/// All trainable weights of the ranker, one tensor set per submodule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// One affine per declared feature group (historical groups first).
    pub summarization: Vec<AffineParams>,
    /// Cross layers: square weight over the summarization output.
    pub cross: Vec<AffineParams>,
    pub mlp: Vec<AffineParams>,
    /// Projection of `x_nonhist` feeding the residual concatenation.
    pub residual_proj: Option<AffineParams>,
    pub experts: Vec<AffineParams>,
    /// Per-task gate over experts.
    pub gates: Vec<AffineParams>,
    /// Per-task scalar head.
    pub heads: Vec<AffineParams>,
}

impl ModelParams {
    /// Deterministic Xavier initialization. Tensors are drawn in declaration
    /// order, so the same seed with a different config yields different draws.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let summarization = config
            .group_dims()
            .iter()
            .zip(&config.summarization_dims)
            .map(|(&d_in, &d_out)| AffineParams::xavier(d_in, d_out, rng))
            .collect();
        let s = config.summarization_out_dim();
        let cross = (0..config.num_cross_layers)
            .map(|_| AffineParams::xavier(s, s, rng))
            .collect();
        let mut mlp = Vec::with_capacity(config.mlp_dims.len());
        let mut d_in = s;
        for &d_out in &config.mlp_dims {
            mlp.push(AffineParams::xavier(d_in, d_out, rng));
            d_in = d_out;
        }
        let residual_proj = config
            .residual_enabled
            .then(|| AffineParams::xavier(config.d_nonhist(), config.residual_proj_dim, rng));
        let d_aug = config.augmented_dim();
        let experts = (0..config.num_experts)
            .map(|_| AffineParams::xavier(d_aug, config.expert_dim, rng))
            .collect();
        let gates = (0..config.num_tasks)
            .map(|_| AffineParams::xavier(d_aug, config.num_experts, rng))
            .collect();
        let heads = (0..config.num_tasks)
            .map(|_| AffineParams::xavier(config.expert_dim, 1, rng))
            .collect();
        Self {
            summarization,
            cross,
            mlp,
            residual_proj,
            experts,
            gates,
            heads,
        }
    }

    /// All-zero parameter set with the shapes demanded by `config`; this is
    /// the gradient/moment container.
    pub fn zeros(config: &ModelConfig) -> Self {
        let summarization = config
            .group_dims()
            .iter()
            .zip(&config.summarization_dims)
            .map(|(&d_in, &d_out)| AffineParams::zeros(d_in, d_out))
            .collect();
        let s = config.summarization_out_dim();
        let cross = (0..config.num_cross_layers)
            .map(|_| AffineParams::zeros(s, s))
            .collect();
        let mut mlp = Vec::with_capacity(config.mlp_dims.len());
        let mut d_in = s;
        for &d_out in &config.mlp_dims {
            mlp.push(AffineParams::zeros(d_in, d_out));
            d_in = d_out;
        }
        let residual_proj = config
            .residual_enabled
            .then(|| AffineParams::zeros(config.d_nonhist(), config.residual_proj_dim));
        let d_aug = config.augmented_dim();
        let experts = (0..config.num_experts)
            .map(|_| AffineParams::zeros(d_aug, config.expert_dim))
            .collect();
        let gates = (0..config.num_tasks)
            .map(|_| AffineParams::zeros(d_aug, config.num_experts))
            .collect();
        let heads = (0..config.num_tasks)
            .map(|_| AffineParams::zeros(config.expert_dim, 1))
            .collect();
        Self {
            summarization,
            cross,
            mlp,
            residual_proj,
            experts,
            gates,
            heads,
        }
    }

    fn affine_sets(&self) -> impl Iterator<Item = &AffineParams> {
        self.summarization
            .iter()
            .chain(&self.cross)
            .chain(&self.mlp)
            .chain(self.residual_proj.iter())
            .chain(&self.experts)
            .chain(&self.gates)
            .chain(&self.heads)
    }

    fn affine_sets_mut(&mut self) -> impl Iterator<Item = &mut AffineParams> {
        self.summarization
            .iter_mut()
            .chain(self.cross.iter_mut())
            .chain(self.mlp.iter_mut())
            .chain(self.residual_proj.iter_mut())
            .chain(self.experts.iter_mut())
            .chain(self.gates.iter_mut())
            .chain(self.heads.iter_mut())
    }

    pub fn param_count(&self) -> usize {
        self.affine_sets().map(AffineParams::param_count).sum()
    }

    /// Flat views over every tensor, in a fixed declaration order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for ap in self.affine_sets() {
            out.push(ap.weights.data());
            out.push(ap.bias.as_slice());
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for ap in self.affine_sets_mut() {
            out.push(ap.weights.data_mut());
            out.push(ap.bias.as_mut_slice());
        }
        out
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for s in self.slices() {
            out.extend_from_slice(s);
        }
        out
    }

    /// Writes a flat vector (from [`Self::to_flat`]) back into the tensors.
    pub fn assign_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch {
                op: "assign_from_flat",
                detail: format!(
                    "flat length {} != parameter count {}",
                    flat.len(),
                    self.param_count()
                ),
            });
        }
        let mut offset = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.affine_sets()
            .all(|ap| ap.weights.is_finite() && ap.bias.iter().all(|v| v.is_finite()))
    }

    /// Shape consistency against a config, e.g. after deserializing.
    pub fn validate_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = Self::zeros(config);
        let ours = self.slices();
        let theirs = expected.slices();
        if ours.len() != theirs.len() {
            return Err(Error::ShapeMismatch {
                op: "validate_shapes",
                detail: format!("{} tensors, expected {}", ours.len(), theirs.len()),
            });
        }
        for (i, (a, b)) in ours.iter().zip(&theirs).enumerate() {
            if a.len() != b.len() {
                return Err(Error::ShapeMismatch {
                    op: "validate_shapes",
                    detail: format!("tensor {} has {} entries, expected {}", i, a.len(), b.len()),
                });
            }
        }
        if !self.is_finite() {
            return Err(Error::NonFinite {
                op: "validate_shapes",
            });
        }
        Ok(())
    }
}
