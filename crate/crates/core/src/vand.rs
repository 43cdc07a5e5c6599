//! Learnable per-unit noise scale and dropout ratio.
//!
//! Each recurrent layer owns two unconstrained vectors. The noise scale is
//! `softplus(sigma_real)` and the dropout ratio is `sigmoid(beta_real)`, both
//! evaluated as `f(sg(raw)) + (raw − sg(raw))` so the forward value is the
//! transformed one while the Jacobian with respect to the raw vector is the
//! identity. Noise is reparameterized as `σ ⊙ ζ`; the Bernoulli mask is
//! straight-through, `m = β + sg(b − β)`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::compute::{Tape, Tensor, UnaryOp, Var};
use crate::error::{Error, Result};

/// Fixed value used by the constant-noise and constant-dropout conditions.
pub const DEFAULT_CONST_VALUE: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    Vanilla,
    ConstNoise,
    VarNoise,
    ConstDropout,
    VarDropout,
    Vand,
}

impl ModeKind {
    pub const ALL: [ModeKind; 6] = [
        ModeKind::Vanilla,
        ModeKind::ConstNoise,
        ModeKind::VarNoise,
        ModeKind::ConstDropout,
        ModeKind::VarDropout,
        ModeKind::Vand,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModeKind::Vanilla => "vanilla",
            ModeKind::ConstNoise => "const_noise",
            ModeKind::VarNoise => "var_noise",
            ModeKind::ConstDropout => "const_dropout",
            ModeKind::VarDropout => "var_dropout",
            ModeKind::Vand => "vand",
        }
    }

    pub fn has_noise(self) -> bool {
        matches!(
            self,
            ModeKind::ConstNoise | ModeKind::VarNoise | ModeKind::Vand
        )
    }

    pub fn has_dropout(self) -> bool {
        matches!(
            self,
            ModeKind::ConstDropout | ModeKind::VarDropout | ModeKind::Vand
        )
    }

    pub fn learns_scale(self) -> bool {
        matches!(self, ModeKind::VarNoise | ModeKind::Vand)
    }

    pub fn learns_ratio(self) -> bool {
        matches!(self, ModeKind::VarDropout | ModeKind::Vand)
    }
}

impl fmt::Display for ModeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModeKind::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = ModeKind::ALL.iter().map(|m| m.name()).collect();
                Error::InvalidConfig(format!(
                    "unknown mode `{s}`; valid modes: {}",
                    valid.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VandMode {
    pub kind: ModeKind,
    #[serde(default = "default_const_value")]
    pub const_value: f64,
}

fn default_const_value() -> f64 {
    DEFAULT_CONST_VALUE
}

impl VandMode {
    pub fn new(kind: ModeKind) -> Self {
        Self {
            kind,
            const_value: DEFAULT_CONST_VALUE,
        }
    }

    pub fn with_const_value(kind: ModeKind, const_value: f64) -> Result<Self> {
        let mode = Self { kind, const_value };
        mode.validate()?;
        Ok(mode)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.const_value > 0.0 && self.const_value < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "const_value must lie in (0, 1), got {}",
                self.const_value
            )));
        }
        Ok(())
    }
}

impl From<ModeKind> for VandMode {
    fn from(kind: ModeKind) -> Self {
        Self::new(kind)
    }
}

/// Raw (pre-transform) regularizer parameters of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VandLayerParams {
    pub sigma_real: Tensor,
    pub beta_real: Tensor,
}

impl VandLayerParams {
    /// Zero raw vectors, i.e. σ = ln 2 and β = 0.5.
    pub fn new(hidden: usize) -> Self {
        Self {
            sigma_real: Tensor::zeros(&[hidden]),
            beta_real: Tensor::zeros(&[hidden]),
        }
    }

    pub fn width(&self) -> usize {
        self.sigma_real.len()
    }

    pub fn validate(&self, hidden: usize) -> Result<()> {
        if self.sigma_real.shape() != [hidden] || self.beta_real.shape() != [hidden] {
            return Err(Error::InconsistentDims(format!(
                "regularizer vectors must have length {hidden}, got {:?} and {:?}",
                self.sigma_real.shape(),
                self.beta_real.shape()
            )));
        }
        Ok(())
    }

    /// Forward-transformed noise scale.
    pub fn sigma(&self) -> Vec<f64> {
        self.sigma_real
            .data()
            .iter()
            .map(|&s| crate::compute::softplus(s))
            .collect()
    }

    /// Forward-transformed dropout ratio.
    pub fn beta(&self) -> Vec<f64> {
        self.beta_real
            .data()
            .iter()
            .map(|&b| crate::compute::sigmoid(b))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Infer,
}

/// Source of the parameter-free randomness behind noise and masks.
pub trait Sampler {
    /// `n` draws from U[0, 1).
    fn uniform(&mut self, n: usize) -> Vec<f64>;
    /// `n` draws from N(0, 1).
    fn standard_normal(&mut self, n: usize) -> Vec<f64>;
}

/// Seeded, splittable random stream.
#[derive(Debug, Clone)]
pub struct RandomStream {
    rng: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        Self::split(seed, 0)
    }

    /// Independent stream `stream` derived from `seed`.
    pub fn split(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

impl Sampler for RandomStream {
    fn uniform(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.rng.random::<f64>()).collect()
    }

    fn standard_normal(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.rng.sample(StandardNormal)).collect()
    }
}

fn straight_through(tape: &mut Tape, raw: Var, f: UnaryOp) -> Var {
    let frozen = tape.stop_gradient(raw);
    let value = tape.unary(f, frozen);
    // `raw − sg(raw)` is exactly zero, so the sum keeps the transformed value bit-for-bit.
    let identity = tape.sub(raw, frozen).expect("same shape");
    tape.add(value, identity).expect("same shape")
}

/// σ = softplus(σ_real) with identity Jacobian.
pub fn transform_scale(tape: &mut Tape, sigma_real: Var) -> Var {
    straight_through(tape, sigma_real, UnaryOp::Softplus)
}

/// β = sigmoid(β_real) with identity Jacobian.
pub fn transform_ratio(tape: &mut Tape, beta_real: Var) -> Var {
    straight_through(tape, beta_real, UnaryOp::Sigmoid)
}

/// ε = σ ⊙ ζ for `rows` independent rows, ζ ~ N(0, I) held constant on the tape.
pub fn sample_noise(tape: &mut Tape, sigma: Var, rows: usize, sampler: &mut dyn Sampler) -> Var {
    let h = tape.value(sigma).len();
    let zeta = Tensor::matrix(rows, h, sampler.standard_normal(rows * h)).expect("rows × h");
    let zeta = tape.constant(zeta);
    let scale = tape.broadcast_rows(sigma, rows);
    tape.mul(scale, zeta).expect("same shape")
}

/// m ~ Bernoulli(β) per row and unit, with the straight-through gradient ∂m/∂β = 1.
pub fn sample_mask(tape: &mut Tape, beta: Var, rows: usize, sampler: &mut dyn Sampler) -> Var {
    let probs = tape.value(beta).data().to_vec();
    let h = probs.len();
    let u = sampler.uniform(rows * h);
    let hard: Vec<f64> = u
        .iter()
        .enumerate()
        .map(|(k, &u)| if u < probs[k % h] { 1.0 } else { 0.0 })
        .collect();
    let hard = tape.constant(Tensor::matrix(rows, h, hard).expect("rows × h"));
    let soft = tape.broadcast_rows(beta, rows);
    let offset = tape.sub(hard, soft).expect("same shape");
    let offset = tape.stop_gradient(offset);
    tape.add(soft, offset).expect("same shape")
}

/// Raw regularizer vectors registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct VandLayerVars {
    pub sigma_real: Var,
    pub beta_real: Var,
}

/// Noise scale and dropout ratio as seen by one layer step.
#[derive(Debug, Clone, Copy)]
pub struct EffectiveParams {
    pub sigma: Var,
    pub beta: Var,
    /// Whether σ and β receive gradient updates in this mode.
    pub learnable: (bool, bool),
    /// Whether noise is injected at all; `false` skips sampling entirely.
    pub noise: bool,
    /// Whether the recurrent mask is applied at all.
    pub dropout: bool,
}

pub fn effective_params(tape: &mut Tape, vars: &VandLayerVars, mode: &VandMode) -> EffectiveParams {
    let h = tape.value(vars.sigma_real).len();
    let mut fixed = |v: f64| tape.constant(Tensor::full(&[h], v));
    let zero_sigma = fixed(0.0);
    let zero_beta = fixed(0.0);
    let c = mode.const_value;
    let (sigma, beta) = match mode.kind {
        ModeKind::Vanilla => (zero_sigma, zero_beta),
        ModeKind::ConstNoise => (fixed(c), zero_beta),
        ModeKind::VarNoise => (transform_scale(tape, vars.sigma_real), zero_beta),
        ModeKind::ConstDropout => (zero_sigma, fixed(c)),
        ModeKind::VarDropout => (zero_sigma, transform_ratio(tape, vars.beta_real)),
        ModeKind::Vand => (
            transform_scale(tape, vars.sigma_real),
            transform_ratio(tape, vars.beta_real),
        ),
    };
    EffectiveParams {
        sigma,
        beta,
        learnable: (mode.kind.learns_scale(), mode.kind.learns_ratio()),
        noise: mode.kind.has_noise(),
        dropout: mode.kind.has_dropout(),
    }
}
