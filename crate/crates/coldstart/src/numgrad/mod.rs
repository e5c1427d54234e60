//! Minimal differentiable dense-layer toolkit.
//!
//! Affine layers, ReLU, sigmoid and concatenation with exact analytic backward
//! passes. Everything downstream (the ranker, the losses, the trainer) is built
//! from these pieces, and every backward pass here is validated against central
//! finite differences.
//!
//! Gradients are accumulated, never implicitly averaged; batch means are the
//! loss functions' business.

mod matrix;

pub use matrix::DenseMatrix;

use crate::error::{Error, Result};

/// Gradients of one affine layer: parameter grads plus the input grad.
#[derive(Debug, Clone)]
pub struct AffineGrad {
    pub d_weights: DenseMatrix,
    pub d_bias: Vec<f64>,
    pub d_input: DenseMatrix,
}

/// `out[b][j] = sum_i input[b][i] * weights[i][j] + bias[j]`.
///
/// `weights` is `d_in x d_out`, row-major; `input` is `batch x d_in`.
pub fn affine_forward(
    input: &DenseMatrix,
    weights: &DenseMatrix,
    bias: &[f64],
) -> Result<DenseMatrix> {
    if input.cols() != weights.rows() {
        return Err(Error::ShapeMismatch {
            op: "affine_forward",
            detail: format!(
                "input is {}x{}, weights are {}x{} (d_in {} != {})",
                input.rows(),
                input.cols(),
                weights.rows(),
                weights.cols(),
                input.cols(),
                weights.rows()
            ),
        });
    }
    if bias.len() != weights.cols() {
        return Err(Error::ShapeMismatch {
            op: "affine_forward",
            detail: format!("bias length {} != d_out {}", bias.len(), weights.cols()),
        });
    }
    let mut out = input.matmul(weights)?;
    for r in 0..out.rows() {
        for (o, &b) in out.row_mut(r).iter_mut().zip(bias) {
            *o += b;
        }
    }
    Ok(out)
}

/// Chain rule through an affine layer.
///
/// `d_weights = input^T * upstream`, `d_bias = column sums of upstream`,
/// `d_input = upstream * weights^T`.
pub fn affine_backward(
    input: &DenseMatrix,
    weights: &DenseMatrix,
    upstream: &DenseMatrix,
) -> Result<AffineGrad> {
    if upstream.rows() != input.rows() || upstream.cols() != weights.cols() {
        return Err(Error::ShapeMismatch {
            op: "affine_backward",
            detail: format!(
                "upstream is {}x{}, expected {}x{}",
                upstream.rows(),
                upstream.cols(),
                input.rows(),
                weights.cols()
            ),
        });
    }
    Ok(AffineGrad {
        d_weights: input.matmul_at_b(upstream)?,
        d_bias: upstream.col_sums(),
        d_input: upstream.matmul_a_bt(weights)?,
    })
}

pub fn relu_forward(input: &DenseMatrix) -> DenseMatrix {
    input.map(|v| v.max(0.0))
}

/// Backward through ReLU given the forward *input* (gradient passes where input > 0).
pub fn relu_backward(input: &DenseMatrix, upstream: &DenseMatrix) -> Result<DenseMatrix> {
    if !input.same_shape(upstream) {
        return Err(Error::ShapeMismatch {
            op: "relu_backward",
            detail: format!(
                "{}x{} vs {}x{}",
                input.rows(),
                input.cols(),
                upstream.rows(),
                upstream.cols()
            ),
        });
    }
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    DenseMatrix::from_vec(input.rows(), input.cols(), data)
}

pub fn sigmoid_forward(input: &DenseMatrix) -> DenseMatrix {
    input.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Backward through sigmoid given the forward *output* y: `dy * y * (1 - y)`.
pub fn sigmoid_backward(output: &DenseMatrix, upstream: &DenseMatrix) -> Result<DenseMatrix> {
    if !output.same_shape(upstream) {
        return Err(Error::ShapeMismatch {
            op: "sigmoid_backward",
            detail: format!(
                "{}x{} vs {}x{}",
                output.rows(),
                output.cols(),
                upstream.rows(),
                upstream.cols()
            ),
        });
    }
    let data = output
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&y, &g)| g * y * (1.0 - y))
        .collect();
    DenseMatrix::from_vec(output.rows(), output.cols(), data)
}

/// `[a; b]` along the feature axis.
pub fn concat_forward(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    a.hcat(b)
}

/// Splits the upstream gradient at the recorded boundary `a_cols`.
pub fn concat_backward(
    upstream: &DenseMatrix,
    a_cols: usize,
) -> Result<(DenseMatrix, DenseMatrix)> {
    upstream.split_cols(a_cols)
}

/// Outcome of comparing analytic gradients against central finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

/// Relative error with an absolute fallback for near-zero gradient pairs,
/// where the ratio is dominated by finite-difference roundoff.
pub fn gradient_relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale > 1e-6 {
        diff / scale
    } else {
        diff
    }
}

/// Checks an analytic gradient against central finite differences.
///
/// `loss` must be a deterministic scalar function of the parameter vector;
/// `analytic_grad[i]` is compared against `(loss(p + eps e_i) - loss(p - eps e_i)) / 2eps`.
/// Failure is a report outcome, not an error.
pub fn finite_difference_check(
    params: &[f64],
    analytic_grad: &[f64],
    mut loss: impl FnMut(&[f64]) -> f64,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if epsilon <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "finite-difference epsilon must be > 0, got {epsilon}"
        )));
    }
    if params.len() != analytic_grad.len() {
        return Err(Error::ShapeMismatch {
            op: "finite_difference_check",
            detail: format!(
                "params length {} != gradient length {}",
                params.len(),
                analytic_grad.len()
            ),
        });
    }
    let mut probe = params.to_vec();
    let mut max_rel = 0.0_f64;
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + epsilon;
        let plus = loss(&probe);
        probe[i] = orig - epsilon;
        let minus = loss(&probe);
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        max_rel = max_rel.max(gradient_relative_error(analytic_grad[i], numeric));
    }
    Ok(GradCheckReport {
        max_relative_error: max_rel,
        tolerance,
        checked: params.len(),
    })
}
