//! Forward passes of the ranker, retaining every intermediate for backprop.
//!
//! The pass is split in two stages:
//!
//! - [`embed`]: summarization -> cross layers -> MLP -> (optional) residual
//!   concatenation, producing the augmented embedding.
//! - [`score_embedding`]: MMoE experts, per-task softmax gates and sigmoid
//!   heads over an augmented embedding.
//!
//! The split exists so a mixed embedding batch can be scored through the same
//! prediction stage it bypasses nothing of.

use crate::error::{Error, Result};
use crate::numgrad::{affine_forward, relu_forward, DenseMatrix};

use super::{ModelConfig, ModelParams};

/// Head sigmoids are clamped into this open interval so task scores stay
/// strictly inside (0,1) even when a logit saturates in f64.
pub(crate) const SCORE_CLAMP: f64 = 1e-12;

/// Intermediate activations of the embedding stage.
#[derive(Debug, Clone)]
pub struct EmbedTrace {
    pub x_hist: DenseMatrix,
    pub x_nonhist: DenseMatrix,
    /// Per-group affine outputs, pre-ReLU.
    pub summ_pre: Vec<DenseMatrix>,
    /// Concatenated post-ReLU summarization output (`x_0` of the cross stack).
    pub summ_out: DenseMatrix,
    /// `u_l = W_l x_l + b_l` per cross layer.
    pub cross_pre: Vec<DenseMatrix>,
    /// `x_{l+1}` per cross layer.
    pub cross_out: Vec<DenseMatrix>,
    /// Per-MLP-layer affine outputs, pre-ReLU.
    pub mlp_pre: Vec<DenseMatrix>,
    /// Per-MLP-layer post-ReLU outputs.
    pub mlp_out: Vec<DenseMatrix>,
    /// The interaction embedding `z`.
    pub interaction_out: DenseMatrix,
    /// Residual projection pre-ReLU, when the residual path is enabled.
    pub residual_pre: Option<DenseMatrix>,
    pub residual_out: Option<DenseMatrix>,
    /// The augmented embedding (`[z; proj(x_nonhist)]` or plain `z`).
    pub augmented: DenseMatrix,
}

/// Intermediate activations of the MMoE prediction stage.
#[derive(Debug, Clone)]
pub struct ScoreTrace {
    /// The embedding this stage consumed (augmented or mixed-augmented).
    pub input: DenseMatrix,
    pub expert_pre: Vec<DenseMatrix>,
    pub expert_out: Vec<DenseMatrix>,
    /// Per-task gate logits, `batch x num_experts`.
    pub gate_logits: Vec<DenseMatrix>,
    /// Per-task softmax gate weights; each row sums to 1.
    pub gate_weights: Vec<DenseMatrix>,
    /// Per-task expert mixtures, `batch x expert_dim`.
    pub mixtures: Vec<DenseMatrix>,
    /// Per-task head logits, `batch x 1`.
    pub head_pre: Vec<DenseMatrix>,
    /// Task scores in (0,1), `batch x num_tasks`.
    pub task_scores: DenseMatrix,
}

/// Full forward trace: everything needed for backward and for diagnostics.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub embed: EmbedTrace,
    pub score: ScoreTrace,
}

impl ForwardTrace {
    pub fn task_scores(&self) -> &DenseMatrix {
        &self.score.task_scores
    }

    pub fn augmented_embedding(&self) -> &DenseMatrix {
        &self.embed.augmented
    }

    pub fn batch_size(&self) -> usize {
        self.embed.x_hist.rows()
    }
}

fn check_inputs(x_hist: &DenseMatrix, x_nonhist: &DenseMatrix, config: &ModelConfig) -> Result<()> {
    if x_hist.cols() != config.d_hist() {
        return Err(Error::ShapeMismatch {
            op: "embed",
            detail: format!(
                "x_hist has {} cols, config d_hist is {}",
                x_hist.cols(),
                config.d_hist()
            ),
        });
    }
    if x_nonhist.cols() != config.d_nonhist() {
        return Err(Error::ShapeMismatch {
            op: "embed",
            detail: format!(
                "x_nonhist has {} cols, config d_nonhist is {}",
                x_nonhist.cols(),
                config.d_nonhist()
            ),
        });
    }
    if x_hist.rows() != x_nonhist.rows() {
        return Err(Error::ShapeMismatch {
            op: "embed",
            detail: format!(
                "batch sizes differ: x_hist {} vs x_nonhist {}",
                x_hist.rows(),
                x_nonhist.rows()
            ),
        });
    }
    Ok(())
}

/// Embedding stage: summarization, cross layers, MLP, residual concatenation.
pub fn embed(
    x_hist: &DenseMatrix,
    x_nonhist: &DenseMatrix,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<EmbedTrace> {
    check_inputs(x_hist, x_nonhist, config)?;

    // Per-group affine + ReLU, outputs concatenated.
    let n_hist_groups = config.hist_group_dims.len();
    let mut summ_pre = Vec::with_capacity(params.summarization.len());
    let mut summ_parts = Vec::with_capacity(params.summarization.len());
    let mut hist_start = 0;
    let mut nonhist_start = 0;
    for (g, ap) in params.summarization.iter().enumerate() {
        let width = ap.weights.rows();
        let group_input = if g < n_hist_groups {
            let m = x_hist.col_range(hist_start, hist_start + width)?;
            hist_start += width;
            m
        } else {
            let m = x_nonhist.col_range(nonhist_start, nonhist_start + width)?;
            nonhist_start += width;
            m
        };
        let pre = affine_forward(&group_input, &ap.weights, &ap.bias)?;
        summ_parts.push(relu_forward(&pre));
        summ_pre.push(pre);
    }
    let mut summ_out = summ_parts[0].clone();
    for part in &summ_parts[1..] {
        summ_out = summ_out.hcat(part)?;
    }

    // Cross layers: x_{l+1} = x_0 (.) (W_l x_l + b_l) + x_l.
    let mut cross_pre = Vec::with_capacity(params.cross.len());
    let mut cross_out = Vec::with_capacity(params.cross.len());
    let mut x_l = summ_out.clone();
    for ap in &params.cross {
        let u = affine_forward(&x_l, &ap.weights, &ap.bias)?;
        let next = summ_out.hadamard(&u)?.add(&x_l)?;
        cross_pre.push(u);
        cross_out.push(next.clone());
        x_l = next;
    }

    // MLP stack, affine + ReLU per layer.
    let mut mlp_pre = Vec::with_capacity(params.mlp.len());
    let mut mlp_out = Vec::with_capacity(params.mlp.len());
    let mut h = x_l;
    for ap in &params.mlp {
        let pre = affine_forward(&h, &ap.weights, &ap.bias)?;
        let out = relu_forward(&pre);
        mlp_pre.push(pre);
        mlp_out.push(out.clone());
        h = out;
    }
    let interaction_out = h;

    // Residual path: affine + ReLU projection of the raw non-historical block,
    // concatenated onto z.
    let (residual_pre, residual_out, augmented) = match &params.residual_proj {
        Some(ap) if config.residual_enabled => {
            let pre = affine_forward(x_nonhist, &ap.weights, &ap.bias)?;
            let out = relu_forward(&pre);
            let augmented = interaction_out.hcat(&out)?;
            (Some(pre), Some(out), augmented)
        }
        _ => (None, None, interaction_out.clone()),
    };

    Ok(EmbedTrace {
        x_hist: x_hist.clone(),
        x_nonhist: x_nonhist.clone(),
        summ_pre,
        summ_out,
        cross_pre,
        cross_out,
        mlp_pre,
        mlp_out,
        interaction_out,
        residual_pre,
        residual_out,
        augmented,
    })
}

/// The interaction embedding `z` for a batch (no residual, no prediction stage).
pub fn interaction_forward(
    x_hist: &DenseMatrix,
    x_nonhist: &DenseMatrix,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<DenseMatrix> {
    Ok(embed(x_hist, x_nonhist, params, config)?.interaction_out)
}

fn softmax_rows(logits: &DenseMatrix) -> DenseMatrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Prediction stage over an augmented embedding batch.
pub fn score_embedding(
    augmented: &DenseMatrix,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<ScoreTrace> {
    if augmented.cols() != config.augmented_dim() {
        return Err(Error::ShapeMismatch {
            op: "score_embedding",
            detail: format!(
                "embedding has {} cols, config augmented_dim is {}",
                augmented.cols(),
                config.augmented_dim()
            ),
        });
    }
    let batch = augmented.rows();

    let mut expert_pre = Vec::with_capacity(params.experts.len());
    let mut expert_out = Vec::with_capacity(params.experts.len());
    for ap in &params.experts {
        let pre = affine_forward(augmented, &ap.weights, &ap.bias)?;
        expert_out.push(relu_forward(&pre));
        expert_pre.push(pre);
    }

    let mut gate_logits = Vec::with_capacity(config.num_tasks);
    let mut gate_weights = Vec::with_capacity(config.num_tasks);
    let mut mixtures = Vec::with_capacity(config.num_tasks);
    let mut head_pre = Vec::with_capacity(config.num_tasks);
    let mut task_scores = DenseMatrix::zeros(batch, config.num_tasks);

    for t in 0..config.num_tasks {
        let logits = affine_forward(augmented, &params.gates[t].weights, &params.gates[t].bias)?;
        let weights = softmax_rows(&logits);

        let mut mixture = DenseMatrix::zeros(batch, config.expert_dim);
        for (e, out) in expert_out.iter().enumerate() {
            for b in 0..batch {
                let w = weights.get(b, e);
                let src = out.row(b);
                for (m, &v) in mixture.row_mut(b).iter_mut().zip(src) {
                    *m += w * v;
                }
            }
        }

        let pre = affine_forward(&mixture, &params.heads[t].weights, &params.heads[t].bias)?;
        for b in 0..batch {
            let y = 1.0 / (1.0 + (-pre.get(b, 0)).exp());
            task_scores.set(b, t, y.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP));
        }

        gate_logits.push(logits);
        gate_weights.push(weights);
        mixtures.push(mixture);
        head_pre.push(pre);
    }

    Ok(ScoreTrace {
        input: augmented.clone(),
        expert_pre,
        expert_out,
        gate_logits,
        gate_weights,
        mixtures,
        head_pre,
        task_scores,
    })
}

/// Full forward pass; the trace retains everything for backward.
pub fn predict(
    x_hist: &DenseMatrix,
    x_nonhist: &DenseMatrix,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<ForwardTrace> {
    let embed_trace = embed(x_hist, x_nonhist, params, config)?;
    let score_trace = score_embedding(&embed_trace.augmented, params, config)?;
    Ok(ForwardTrace {
        embed: embed_trace,
        score: score_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelParams};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flat_config() -> ModelConfig {
        // One group per block, no cross layers, single MLP layer sized to the
        // summarization output so identity weights are expressible.
        ModelConfig {
            hist_group_dims: vec![2],
            nonhist_group_dims: vec![2],
            summarization_dims: vec![2, 2],
            num_cross_layers: 0,
            mlp_dims: vec![4],
            num_experts: 2,
            expert_dim: 3,
            num_tasks: 2,
            residual_enabled: false,
            residual_proj_dim: 2,
        }
    }

    fn identity(n: usize) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    #[test]
    fn zero_cross_layers_identity_mlp_passes_summarization_through() {
        let cfg = flat_config();
        let mut params = init_params(&cfg, 1).unwrap();
        params.mlp[0].weights = identity(4);
        params.mlp[0].bias = vec![0.0; 4];

        let xh = DenseMatrix::from_rows(&[vec![0.5, -1.0]]).unwrap();
        let xn = DenseMatrix::from_rows(&[vec![2.0, 0.25]]).unwrap();
        let trace = embed(&xh, &xn, &params, &cfg).unwrap();
        assert_eq!(trace.interaction_out, trace.summ_out);
    }

    #[test]
    fn all_zero_weights_give_zero_interaction() {
        let mut cfg = flat_config();
        cfg.num_cross_layers = 2;
        cfg.mlp_dims = vec![];
        let params = ModelParams::zeros(&cfg);
        let xh = DenseMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let xn = DenseMatrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let z = interaction_forward(&xh, &xn, &params, &cfg).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_cross_layer_matches_hand_arithmetic() {
        // d=2 (one group of width 1 per block, summ dim 1 each), hand-set
        // weights, checked against x0 (.) (W x0 + b) + x0 computed by hand.
        let cfg = ModelConfig {
            hist_group_dims: vec![1],
            nonhist_group_dims: vec![1],
            summarization_dims: vec![1, 1],
            num_cross_layers: 1,
            mlp_dims: vec![],
            num_experts: 1,
            expert_dim: 1,
            num_tasks: 1,
            residual_enabled: false,
            residual_proj_dim: 1,
        };
        let mut params = ModelParams::zeros(&cfg);
        // summarization: identity pass-through of each input scalar
        params.summarization[0].weights.set(0, 0, 1.0);
        params.summarization[1].weights.set(0, 0, 1.0);
        // cross layer W = [[0.5, -1.0], [2.0, 0.0]], b = (0.1, -0.2)
        params.cross[0].weights =
            DenseMatrix::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.0]]).unwrap();
        params.cross[0].bias = vec![0.1, -0.2];

        let xh = DenseMatrix::from_rows(&[vec![2.0]]).unwrap();
        let xn = DenseMatrix::from_rows(&[vec![3.0]]).unwrap();
        let z = interaction_forward(&xh, &xn, &params, &cfg).unwrap();

        // x0 = (2, 3); u = W^T-free convention: u_j = sum_i x0_i W[i][j] + b_j
        // u_0 = 2*0.5 + 3*2.0 + 0.1 = 7.1; u_1 = 2*(-1.0) + 3*0.0 - 0.2 = -2.2
        // z = x0 .* u + x0 = (2*7.1 + 2, 3*(-2.2) + 3) = (16.2, -3.6)
        assert!((z.get(0, 0) - 16.2).abs() < 1e-12);
        assert!((z.get(0, 1) - (-3.6)).abs() < 1e-12);
    }

    #[test]
    fn single_expert_gate_is_exactly_one() {
        let mut cfg = flat_config();
        cfg.num_experts = 1;
        let params = init_params(&cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xh = DenseMatrix::from_vec(3, 2, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let xn = DenseMatrix::from_vec(3, 2, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let trace = predict(&xh, &xn, &params, &cfg).unwrap();
        for t in 0..cfg.num_tasks {
            assert!(trace.score.gate_weights[t].data().iter().all(|&g| g == 1.0));
        }
    }

    #[test]
    fn zero_heads_score_half() {
        let cfg = flat_config();
        let mut params = init_params(&cfg, 4).unwrap();
        for head in &mut params.heads {
            *head = head.zeros_like();
        }
        let xh = DenseMatrix::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let xn = DenseMatrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let trace = predict(&xh, &xn, &params, &cfg).unwrap();
        assert!(trace.task_scores().data().iter().all(|&s| s == 0.5));
    }

    #[test]
    fn gates_sum_to_one_and_scores_stay_in_unit_interval() {
        let cfg = ModelConfig::default().with_residual(true);
        let params = init_params(&cfg, 99).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 16;
        let xh = DenseMatrix::from_vec(
            n,
            cfg.d_hist(),
            (0..n * cfg.d_hist())
                .map(|_| rng.random_range(-3.0..3.0))
                .collect(),
        )
        .unwrap();
        let xn = DenseMatrix::from_vec(
            n,
            cfg.d_nonhist(),
            (0..n * cfg.d_nonhist())
                .map(|_| rng.random_range(-3.0..3.0))
                .collect(),
        )
        .unwrap();
        let trace = predict(&xh, &xn, &params, &cfg).unwrap();
        for t in 0..cfg.num_tasks {
            for b in 0..n {
                let sum: f64 = trace.score.gate_weights[t].row(b).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "gate row sums to {sum}");
            }
        }
        assert!(trace
            .task_scores()
            .data()
            .iter()
            .all(|&s| s > 0.0 && s < 1.0));
        assert_eq!(
            trace.augmented_embedding().cols(),
            cfg.interaction_dim() + cfg.residual_proj_dim
        );
    }

    #[test]
    fn predict_is_deterministic() {
        let cfg = ModelConfig::default();
        let params = init_params(&cfg, 1).unwrap();
        let xh = DenseMatrix::from_vec(2, cfg.d_hist(), vec![0.1; 2 * cfg.d_hist()]).unwrap();
        let xn = DenseMatrix::from_vec(2, cfg.d_nonhist(), vec![0.2; 2 * cfg.d_nonhist()]).unwrap();
        let a = predict(&xh, &xn, &params, &cfg).unwrap();
        let b = predict(&xh, &xn, &params, &cfg).unwrap();
        assert_eq!(a.task_scores(), b.task_scores());
    }

    #[test]
    fn mismatched_widths_are_rejected() {
        let cfg = flat_config();
        let params = init_params(&cfg, 1).unwrap();
        let xh = DenseMatrix::zeros(1, 3);
        let xn = DenseMatrix::zeros(1, 2);
        let err = predict(&xh, &xn, &params, &cfg).unwrap_err();
        assert!(err.to_string().contains("d_hist"), "got: {err}");
    }
}
