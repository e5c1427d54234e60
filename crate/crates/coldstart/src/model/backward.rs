//! Exact backward passes through the ranker.
//!
//! Mirrors the two forward stages: [`backward_score`] walks the MMoE stage
//! back to a gradient on the augmented embedding, [`backward_embed`] continues
//! through the residual path, MLP, cross layers and summarization down to both
//! input feature blocks. Parameter gradients are accumulated into a caller
//! supplied [`ModelParams`]-shaped container, so the mixed mixup branch can add
//! its contribution on top of the main branch.

use crate::error::{Error, Result};
use crate::numgrad::{affine_backward, relu_backward, sigmoid_backward, DenseMatrix};

use super::{EmbedTrace, ModelConfig, ModelParams, ScoreTrace};

/// Gradients of one backward pass: parameter grads plus both input-feature grads.
#[derive(Debug)]
pub struct BackwardResult {
    pub grads: ModelParams,
    pub d_x_hist: DenseMatrix,
    pub d_x_nonhist: DenseMatrix,
}

fn accumulate_affine(
    grads: &mut super::AffineParams,
    input: &DenseMatrix,
    weights: &DenseMatrix,
    upstream: &DenseMatrix,
    accumulate_params: bool,
) -> Result<DenseMatrix> {
    let g = affine_backward(input, weights, upstream)?;
    if accumulate_params {
        grads.weights.add_assign_scaled(&g.d_weights, 1.0)?;
        for (b, &d) in grads.bias.iter_mut().zip(&g.d_bias) {
            *b += d;
        }
    }
    Ok(g.d_input)
}

/// Backward through the MMoE stage; returns the gradient on the trace's input
/// embedding. `upstream_scores` is dL/d(task scores), `batch x num_tasks`.
pub fn backward_score(
    trace: &ScoreTrace,
    upstream_scores: &DenseMatrix,
    params: &ModelParams,
    config: &ModelConfig,
    grads: &mut ModelParams,
    accumulate_params: bool,
) -> Result<DenseMatrix> {
    if !upstream_scores.same_shape(&trace.task_scores) {
        return Err(Error::ShapeMismatch {
            op: "backward_score",
            detail: format!(
                "upstream is {}x{}, trace scores are {}x{} (stale trace?)",
                upstream_scores.rows(),
                upstream_scores.cols(),
                trace.task_scores.rows(),
                trace.task_scores.cols()
            ),
        });
    }
    let batch = trace.input.rows();
    let num_experts = params.experts.len();
    let mut d_input = DenseMatrix::zeros(batch, trace.input.cols());
    // dL/d(expert output), accumulated across tasks.
    let mut d_expert_out: Vec<DenseMatrix> = (0..num_experts)
        .map(|_| DenseMatrix::zeros(batch, config.expert_dim))
        .collect();

    for t in 0..config.num_tasks {
        // Head: sigmoid then affine.
        let scores_t = trace.task_scores.col_range(t, t + 1)?;
        let upstream_t = upstream_scores.col_range(t, t + 1)?;
        let d_head_pre = sigmoid_backward(&scores_t, &upstream_t)?;
        let d_mixture = accumulate_affine(
            &mut grads.heads[t],
            &trace.mixtures[t],
            &params.heads[t].weights,
            &d_head_pre,
            accumulate_params,
        )?;

        // Mixture: mix_t[b] = sum_e gate[b][e] * expert_out_e[b].
        let gate = &trace.gate_weights[t];
        let mut d_gate_weights = DenseMatrix::zeros(batch, num_experts);
        for (e, out) in trace.expert_out.iter().enumerate() {
            for b in 0..batch {
                let dot: f64 = d_mixture
                    .row(b)
                    .iter()
                    .zip(out.row(b))
                    .map(|(&a, &o)| a * o)
                    .sum();
                d_gate_weights.set(b, e, dot);
                let w = gate.get(b, e);
                for (de, &dm) in d_expert_out[e].row_mut(b).iter_mut().zip(d_mixture.row(b)) {
                    *de += w * dm;
                }
            }
        }

        // Softmax backward: dl = g (.) (dg - sum(dg (.) g)).
        let mut d_gate_logits = DenseMatrix::zeros(batch, num_experts);
        for b in 0..batch {
            let g_row = gate.row(b);
            let dg_row = d_gate_weights.row(b);
            let inner: f64 = g_row.iter().zip(dg_row).map(|(&g, &dg)| g * dg).sum();
            for (e, d) in d_gate_logits.row_mut(b).iter_mut().enumerate() {
                *d = g_row[e] * (dg_row[e] - inner);
            }
        }
        let d_in = accumulate_affine(
            &mut grads.gates[t],
            &trace.input,
            &params.gates[t].weights,
            &d_gate_logits,
            accumulate_params,
        )?;
        d_input.add_assign_scaled(&d_in, 1.0)?;
    }

    for (e, ap) in params.experts.iter().enumerate() {
        let d_pre = relu_backward(&trace.expert_pre[e], &d_expert_out[e])?;
        let d_in = accumulate_affine(
            &mut grads.experts[e],
            &trace.input,
            &ap.weights,
            &d_pre,
            accumulate_params,
        )?;
        d_input.add_assign_scaled(&d_in, 1.0)?;
    }

    Ok(d_input)
}

/// Backward through the embedding stage given dL/d(augmented embedding).
/// Returns gradients on both input feature blocks.
pub fn backward_embed(
    trace: &EmbedTrace,
    d_augmented: &DenseMatrix,
    params: &ModelParams,
    config: &ModelConfig,
    grads: &mut ModelParams,
    accumulate_params: bool,
) -> Result<(DenseMatrix, DenseMatrix)> {
    if !d_augmented.same_shape(&trace.augmented) {
        return Err(Error::ShapeMismatch {
            op: "backward_embed",
            detail: format!(
                "d_augmented is {}x{}, trace augmented is {}x{} (stale trace?)",
                d_augmented.rows(),
                d_augmented.cols(),
                trace.augmented.rows(),
                trace.augmented.cols()
            ),
        });
    }
    let batch = trace.x_hist.rows();
    let mut d_x_hist = DenseMatrix::zeros(batch, config.d_hist());
    let mut d_x_nonhist = DenseMatrix::zeros(batch, config.d_nonhist());

    // Split off the residual columns and push them back through the projection.
    let d_z = if config.residual_enabled {
        let (d_z, d_proj_out) = d_augmented.split_cols(config.interaction_dim())?;
        let pre = trace.residual_pre.as_ref().ok_or(Error::ShapeMismatch {
            op: "backward_embed",
            detail: "residual enabled but trace has no residual activations".into(),
        })?;
        let ap = params.residual_proj.as_ref().ok_or(Error::ShapeMismatch {
            op: "backward_embed",
            detail: "residual enabled but params have no projection".into(),
        })?;
        let d_pre = relu_backward(pre, &d_proj_out)?;
        let proj_grads = grads.residual_proj.as_mut().ok_or(Error::ShapeMismatch {
            op: "backward_embed",
            detail: "gradient container missing residual projection".into(),
        })?;
        let d_in = accumulate_affine(
            proj_grads,
            &trace.x_nonhist,
            &ap.weights,
            &d_pre,
            accumulate_params,
        )?;
        d_x_nonhist.add_assign_scaled(&d_in, 1.0)?;
        d_z
    } else {
        d_augmented.clone()
    };

    // MLP stack in reverse.
    let mut d = d_z;
    for l in (0..params.mlp.len()).rev() {
        let d_pre = relu_backward(&trace.mlp_pre[l], &d)?;
        let input = if l == 0 {
            trace.cross_out.last().unwrap_or(&trace.summ_out)
        } else {
            &trace.mlp_out[l - 1]
        };
        d = accumulate_affine(
            &mut grads.mlp[l],
            input,
            &params.mlp[l].weights,
            &d_pre,
            accumulate_params,
        )?;
    }

    // Cross layers in reverse. `d` currently holds dL/d(x_{L}); x_0 feeds every
    // layer through the elementwise gate, so its contributions accumulate.
    let x0 = &trace.summ_out;
    let mut d_x0_acc = DenseMatrix::zeros(batch, x0.cols());
    for l in (0..params.cross.len()).rev() {
        let u = &trace.cross_pre[l];
        let x_l = if l == 0 { x0 } else { &trace.cross_out[l - 1] };
        let d_u = d.hadamard(x0)?;
        d_x0_acc.add_assign_scaled(&d.hadamard(u)?, 1.0)?;
        let d_lin = accumulate_affine(
            &mut grads.cross[l],
            x_l,
            &params.cross[l].weights,
            &d_u,
            accumulate_params,
        )?;
        d = d_lin.add(&d)?;
    }
    let d_summ_out = d.add(&d_x0_acc)?;

    // Summarization groups in reverse order of concatenation.
    let n_hist_groups = config.hist_group_dims.len();
    let mut col = 0;
    let mut hist_start = 0;
    let mut nonhist_start = 0;
    for (g, ap) in params.summarization.iter().enumerate() {
        let width = ap.weights.cols();
        let d_group_out = d_summ_out.col_range(col, col + width)?;
        col += width;
        let d_pre = relu_backward(&trace.summ_pre[g], &d_group_out)?;
        let in_width = ap.weights.rows();
        let group_input = if g < n_hist_groups {
            trace.x_hist.col_range(hist_start, hist_start + in_width)?
        } else {
            trace
                .x_nonhist
                .col_range(nonhist_start, nonhist_start + in_width)?
        };
        let d_in = accumulate_affine(
            &mut grads.summarization[g],
            &group_input,
            &ap.weights,
            &d_pre,
            accumulate_params,
        )?;
        if g < n_hist_groups {
            d_x_hist.add_into_cols(hist_start, &d_in)?;
            hist_start += in_width;
        } else {
            d_x_nonhist.add_into_cols(nonhist_start, &d_in)?;
            nonhist_start += in_width;
        }
    }

    Ok((d_x_hist, d_x_nonhist))
}

/// Full backward pass: exact gradients for all parameters and both input
/// feature blocks. When the residual path is enabled the non-historical input
/// gradient includes both the interaction route and the residual route.
pub fn backward(
    trace: &super::ForwardTrace,
    upstream_scores: &DenseMatrix,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<BackwardResult> {
    let mut grads = ModelParams::zeros(config);
    let d_aug = backward_score(
        &trace.score,
        upstream_scores,
        params,
        config,
        &mut grads,
        true,
    )?;
    let (d_x_hist, d_x_nonhist) =
        backward_embed(&trace.embed, &d_aug, params, config, &mut grads, true)?;
    Ok(BackwardResult {
        grads,
        d_x_hist,
        d_x_nonhist,
    })
}

/// Input-feature gradients only; skips parameter-gradient accumulation.
/// Used for the per-step gradient-norm diagnostics.
pub fn input_gradients(
    trace: &super::ForwardTrace,
    upstream_scores: &DenseMatrix,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let mut scratch = ModelParams::zeros(config);
    let d_aug = backward_score(
        &trace.score,
        upstream_scores,
        params,
        config,
        &mut scratch,
        false,
    )?;
    backward_embed(&trace.embed, &d_aug, params, config, &mut scratch, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, predict, ModelConfig};
    use crate::numgrad::{finite_difference_check, DenseMatrix};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(residual: bool) -> ModelConfig {
        ModelConfig {
            hist_group_dims: vec![3, 2],
            nonhist_group_dims: vec![2, 2],
            summarization_dims: vec![3, 2, 2, 2],
            num_cross_layers: 1,
            mlp_dims: vec![5, 4],
            num_experts: 3,
            expert_dim: 3,
            num_tasks: 2,
            residual_enabled: residual,
            residual_proj_dim: 2,
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.5..1.5))
            .collect();
        DenseMatrix::from_vec(rows, cols, data).unwrap()
    }

    /// Scalar probe loss: weighted sum of task scores, so upstream = weights.
    fn probe_loss(scores: &DenseMatrix) -> (f64, DenseMatrix) {
        let mut upstream = DenseMatrix::zeros(scores.rows(), scores.cols());
        let mut loss = 0.0;
        for r in 0..scores.rows() {
            for c in 0..scores.cols() {
                let w = 1.0 + 0.3 * (r as f64) - 0.2 * (c as f64);
                loss += w * scores.get(r, c);
                upstream.set(r, c, w);
            }
        }
        (loss, upstream)
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cfg = tiny_config(true);
        let params = init_params(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xh = random_batch(&mut rng, 3, cfg.d_hist());
        let xn = random_batch(&mut rng, 3, cfg.d_nonhist());
        let trace = predict(&xh, &xn, &params, &cfg).unwrap();
        let upstream = DenseMatrix::zeros(3, cfg.num_tasks);
        let result = backward(&trace, &upstream, &params, &cfg).unwrap();
        assert!(result.grads.to_flat().iter().all(|&v| v == 0.0));
        assert!(result.d_x_hist.data().iter().all(|&v| v == 0.0));
        assert!(result.d_x_nonhist.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        for residual in [false, true] {
            let cfg = tiny_config(residual);
            let params = init_params(&cfg, 17).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let xh = random_batch(&mut rng, 4, cfg.d_hist());
            let xn = random_batch(&mut rng, 4, cfg.d_nonhist());

            let trace = predict(&xh, &xn, &params, &cfg).unwrap();
            let (_, upstream) = probe_loss(trace.task_scores());
            let result = backward(&trace, &upstream, &params, &cfg).unwrap();

            let flat = params.to_flat();
            let mut scratch = params.clone();
            let report = finite_difference_check(
                &flat,
                &result.grads.to_flat(),
                |p| {
                    scratch.assign_from_flat(p).unwrap();
                    let t = predict(&xh, &xn, &scratch, &cfg).unwrap();
                    probe_loss(t.task_scores()).0
                },
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(
                report.passed(),
                "residual={residual}: param grads max rel err {}",
                report.max_relative_error
            );

            // input gradients
            let report = finite_difference_check(
                xh.data(),
                result.d_x_hist.data(),
                |p| {
                    let x = DenseMatrix::from_vec(4, cfg.d_hist(), p.to_vec()).unwrap();
                    let t = predict(&x, &xn, &params, &cfg).unwrap();
                    probe_loss(t.task_scores()).0
                },
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(
                report.passed(),
                "residual={residual}: x_hist grads max rel err {}",
                report.max_relative_error
            );

            let report = finite_difference_check(
                xn.data(),
                result.d_x_nonhist.data(),
                |p| {
                    let x = DenseMatrix::from_vec(4, cfg.d_nonhist(), p.to_vec()).unwrap();
                    let t = predict(&xh, &x, &params, &cfg).unwrap();
                    probe_loss(t.task_scores()).0
                },
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(
                report.passed(),
                "residual={residual}: x_nonhist grads max rel err {}",
                report.max_relative_error
            );
        }
    }

    #[test]
    fn stale_trace_is_rejected() {
        let cfg = tiny_config(false);
        let params = init_params(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xh = random_batch(&mut rng, 2, cfg.d_hist());
        let xn = random_batch(&mut rng, 2, cfg.d_nonhist());
        let trace = predict(&xh, &xn, &params, &cfg).unwrap();
        let bad_upstream = DenseMatrix::zeros(3, cfg.num_tasks);
        let err = backward(&trace, &bad_upstream, &params, &cfg).unwrap_err();
        assert!(err.to_string().contains("stale"), "got: {err}");
    }

    #[test]
    fn input_gradients_agree_with_full_backward() {
        let cfg = tiny_config(true);
        let params = init_params(&cfg, 23).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xh = random_batch(&mut rng, 3, cfg.d_hist());
        let xn = random_batch(&mut rng, 3, cfg.d_nonhist());
        let trace = predict(&xh, &xn, &params, &cfg).unwrap();
        let (_, upstream) = probe_loss(trace.task_scores());
        let full = backward(&trace, &upstream, &params, &cfg).unwrap();
        let (dh, dn) = input_gradients(&trace, &upstream, &params, &cfg).unwrap();
        assert_eq!(full.d_x_hist, dh);
        assert_eq!(full.d_x_nonhist, dn);
    }

    /// Residual-off comparison params: keep all shared tensors, drop the rows
    /// of the expert/gate weights that multiply the residual columns.
    fn strip_residual(params: &ModelParams, cfg_on: &ModelConfig) -> ModelParams {
        let d_i = cfg_on.interaction_dim();
        let truncate = |ap: &super::super::AffineParams| {
            let cols = ap.weights.cols();
            let data = ap.weights.data()[..d_i * cols].to_vec();
            super::super::AffineParams {
                weights: DenseMatrix::from_vec(d_i, cols, data).unwrap(),
                bias: ap.bias.clone(),
            }
        };
        ModelParams {
            summarization: params.summarization.clone(),
            cross: params.cross.clone(),
            mlp: params.mlp.clone(),
            residual_proj: None,
            experts: params.experts.iter().map(truncate).collect(),
            gates: params.gates.iter().map(truncate).collect(),
            heads: params.heads.clone(),
        }
    }

    #[test]
    fn residual_strictly_increases_nonhist_input_gradient() {
        // Direct evaluation: with identical shared weights, adding the
        // residual path increases the non-historical gradient norm.
        let cfg_on = tiny_config(true);
        let cfg_off = tiny_config(false);
        let params_on = init_params(&cfg_on, 41).unwrap();
        let params_off = strip_residual(&params_on, &cfg_on);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xh = random_batch(&mut rng, 8, cfg_on.d_hist());
        let xn = random_batch(&mut rng, 8, cfg_on.d_nonhist());

        let (_, upstream_on, norm_on) = {
            let t = predict(&xh, &xn, &params_on, &cfg_on).unwrap();
            let (_, up) = probe_loss(t.task_scores());
            let r = backward(&t, &up, &params_on, &cfg_on).unwrap();
            (t, up, r.d_x_nonhist.frobenius_norm())
        };
        let norm_off = {
            let t = predict(&xh, &xn, &params_off, &cfg_off).unwrap();
            let (_, up) = probe_loss(t.task_scores());
            let r = backward(&t, &up, &params_off, &cfg_off).unwrap();
            r.d_x_nonhist.frobenius_norm()
        };
        let _ = upstream_on;
        assert!(
            norm_on > norm_off,
            "residual on {norm_on} should exceed off {norm_off}"
        );
    }
}
