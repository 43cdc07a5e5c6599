//! Diagonal Gaussian output head, its negative log-likelihood and the MSE metric.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compute::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::vand::RandomStream;

/// Added to the softplus variance so the likelihood never sees `var = 0`.
pub const VAR_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianHeadParams {
    pub w_mu: Tensor,
    pub b_mu: Tensor,
    pub w_var: Tensor,
    pub b_var: Tensor,
}

impl GaussianHeadParams {
    /// Weights ~ U(−1/√H, 1/√H), zero biases.
    pub fn init(hidden: usize, output_dim: usize, rng: &mut RandomStream) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut uniform = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.rng().random_range(-bound..bound)).collect()
        };
        Self {
            w_mu: Tensor::matrix(output_dim, hidden, uniform(output_dim * hidden)).unwrap(),
            b_mu: Tensor::zeros(&[output_dim]),
            w_var: Tensor::matrix(output_dim, hidden, uniform(output_dim * hidden)).unwrap(),
            b_var: Tensor::zeros(&[output_dim]),
        }
    }

    pub fn zeros(hidden: usize, output_dim: usize) -> Self {
        Self {
            w_mu: Tensor::zeros(&[output_dim, hidden]),
            b_mu: Tensor::zeros(&[output_dim]),
            w_var: Tensor::zeros(&[output_dim, hidden]),
            b_var: Tensor::zeros(&[output_dim]),
        }
    }

    pub fn validate(&self, hidden: usize, output_dim: usize) -> Result<()> {
        let ok = self.w_mu.shape() == [output_dim, hidden]
            && self.w_var.shape() == [output_dim, hidden]
            && self.b_mu.shape() == [output_dim]
            && self.b_var.shape() == [output_dim];
        if !ok {
            return Err(Error::InconsistentDims(format!(
                "head shapes do not match hidden={hidden}, outputs={output_dim}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub w_mu: Var,
    pub b_mu: Var,
    pub w_var: Var,
    pub b_var: Var,
}

/// `mu = h·W_muᵀ + b_mu`, `var = softplus(h·W_varᵀ + b_var) + VAR_FLOOR`.
pub fn head_forward(tape: &mut Tape, h: Var, p: &HeadVars) -> Result<(Var, Var)> {
    let mu = tape.matmul_nt(h, p.w_mu)?;
    let mu = tape.add_bias(mu, p.b_mu)?;
    let pre = tape.matmul_nt(h, p.w_var)?;
    let pre = tape.add_bias(pre, p.b_var)?;
    let sp = tape.softplus(pre);
    let floor = tape.scalar(VAR_FLOOR);
    let var = tape.add(sp, floor)?;
    Ok((mu, var))
}

/// Sum of per-row Gaussian negative log-likelihoods, divided by `divisor`.
///
/// Each row contributes `Σᵢ ½[ln(2π·varᵢ) + (yᵢ − muᵢ)²/varᵢ]`.
pub fn gaussian_nll_sum(tape: &mut Tape, mu: Var, var: Var, y: Var, divisor: f64) -> Result<Var> {
    if tape.value(var).data().iter().any(|&v| v.is_nan() || v <= 0.0) {
        return Err(Error::NonPositiveVariance);
    }
    let n = tape.value(mu).len();
    let resid = tape.sub(y, mu)?;
    let sq = tape.square(resid);
    let quad = tape.div(sq, var)?;
    let logv = tape.log(var);
    let terms = tape.add(logv, quad)?;
    let total = tape.sum(terms);
    let scaled = tape.scale(total, 0.5 / divisor);
    let constant = tape.scalar(0.5 * LN_2PI * n as f64 / divisor);
    tape.add(scaled, constant)
}

/// Mean over rows (batch) of the per-row Gaussian negative log-likelihood.
pub fn gaussian_nll(tape: &mut Tape, mu: Var, var: Var, y: Var) -> Result<Var> {
    let (rows, _) = tape.value(mu).dims2()?;
    gaussian_nll_sum(tape, mu, var, y, rows as f64)
}

/// Mean squared error over all elements.
pub fn mse(mu: &Tensor, y: &Tensor) -> Result<f64> {
    if mu.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            op: "mse",
            left: mu.shape().to_vec(),
            right: y.shape().to_vec(),
        });
    }
    let s: f64 = mu
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(s / mu.len() as f64)
}
