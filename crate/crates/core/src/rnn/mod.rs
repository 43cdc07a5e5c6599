//! LSTM recurrence with the regularizer insertion points.
//!
//! Per layer and step, the mask acts on the previous hidden state before the
//! cell and the noise is added to the layer output passed upward. The clean
//! hidden state recurs unless `noise_in_recurrence` is set; the cell state is
//! untouched unless `mask_cell_state` is set.

mod model;

pub use model::{LayerParams, ModelMeta, ModelVars, RecurrentState, StackedModel, FORMAT_VERSION};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compute::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::vand::{
    effective_params, sample_mask, sample_noise, EffectiveParams, Phase, RandomStream, Sampler,
    VandLayerVars, VandMode,
};

/// Gate blocks are laid out `i, f, g, o` along the `4H` axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmLayerParams {
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub bias: Tensor,
}

impl LstmLayerParams {
    /// Weights ~ U(−1/√H, 1/√H); biases likewise except the forget block at +1.
    pub fn init(input_dim: usize, hidden: usize, rng: &mut RandomStream) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut uniform = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.rng().random_range(-bound..bound)).collect()
        };
        let w_ih = Tensor::matrix(4 * hidden, input_dim, uniform(4 * hidden * input_dim)).unwrap();
        let w_hh = Tensor::matrix(4 * hidden, hidden, uniform(4 * hidden * hidden)).unwrap();
        let mut bias = uniform(4 * hidden);
        bias[hidden..2 * hidden].fill(1.0);
        Self {
            w_ih,
            w_hh,
            bias: Tensor::vector(bias),
        }
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            w_ih: Tensor::zeros(&[4 * hidden, input_dim]),
            w_hh: Tensor::zeros(&[4 * hidden, hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.shape()[1]
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.shape()[1]
    }

    pub fn validate(&self, input_dim: usize, hidden: usize) -> Result<()> {
        let ok = self.w_ih.shape() == [4 * hidden, input_dim]
            && self.w_hh.shape() == [4 * hidden, hidden]
            && self.bias.shape() == [4 * hidden];
        if !ok {
            return Err(Error::InconsistentDims(format!(
                "LSTM layer shapes {:?}, {:?}, {:?} do not match input {input_dim}, hidden {hidden}",
                self.w_ih.shape(),
                self.w_hh.shape(),
                self.bias.shape()
            )));
        }
        if !(self.w_ih.is_finite() && self.w_hh.is_finite() && self.bias.is_finite()) {
            return Err(Error::NonFinite("LSTM weights".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

/// Hidden and cell state of one layer, each `[B×H]`.
#[derive(Debug, Clone, Copy)]
pub struct LayerState {
    pub h: Var,
    pub c: Var,
}

impl LayerState {
    pub fn zeros(tape: &mut Tape, batch: usize, hidden: usize) -> Self {
        Self {
            h: tape.constant(Tensor::zeros(&[batch, hidden])),
            c: tape.constant(Tensor::zeros(&[batch, hidden])),
        }
    }
}

/// Switches for alternative placements of noise and mask.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepOptions {
    /// Feed the noisy output back into the recurrence instead of the clean state.
    #[serde(default)]
    pub noise_in_recurrence: bool,
    /// Apply the recurrent mask to the cell state as well.
    #[serde(default)]
    pub mask_cell_state: bool,
}

pub fn lstm_cell(tape: &mut Tape, x: Var, h_prev: Var, c_prev: Var, p: &LstmVars) -> Result<(Var, Var)> {
    let hidden = tape.value(p.w_hh).shape()[1];
    if tape.value(h_prev).shape() != tape.value(c_prev).shape()
        || tape.value(h_prev).dims2()?.1 != hidden
    {
        return Err(Error::ShapeMismatch {
            op: "lstm_cell",
            left: tape.value(h_prev).shape().to_vec(),
            right: tape.value(c_prev).shape().to_vec(),
        });
    }
    let proj = project_input(tape, x, p)?;
    cell_from_projection(tape, proj, h_prev, c_prev, p.w_hh)
}

/// `x·W_ihᵀ + bias`, the input half of the gate pre-activations. Works for
/// one step or for a whole time-major sequence stacked along rows.
fn project_input(tape: &mut Tape, x: Var, p: &LstmVars) -> Result<Var> {
    let from_x = tape.matmul_nt(x, p.w_ih)?;
    tape.add_bias(from_x, p.bias)
}

fn cell_from_projection(tape: &mut Tape, proj: Var, h_prev: Var, c_prev: Var, w_hh: Var) -> Result<(Var, Var)> {
    let hidden = tape.value(w_hh).shape()[1];
    let from_h = tape.matmul_nt(h_prev, w_hh)?;
    let pre = tape.add(proj, from_h)?;
    let hc = tape.lstm_gates(pre, c_prev)?;
    let h = tape.slice_cols(hc, 0, hidden)?;
    let c = tape.slice_cols(hc, hidden, hidden)?;
    Ok((h, c))
}

/// One layer, one step. Returns the forwarded output and the next state.
///
/// Training draws the mask first and then the noise; inference replaces the
/// mask by its mean `β` and the noise by zero without touching the sampler.
#[allow(clippy::too_many_arguments)]
pub fn vand_layer_step(
    tape: &mut Tape,
    x_in: Var,
    state: LayerState,
    p: &LstmVars,
    eff: &EffectiveParams,
    phase: Phase,
    opts: StepOptions,
    sampler: Option<&mut (dyn Sampler + '_)>,
) -> Result<(Var, LayerState)> {
    let proj = project_input(tape, x_in, p)?;
    step_from_projection(tape, proj, state, p.w_hh, eff, phase, opts, sampler)
}

#[allow(clippy::too_many_arguments)]
fn step_from_projection(
    tape: &mut Tape,
    proj: Var,
    state: LayerState,
    w_hh: Var,
    eff: &EffectiveParams,
    phase: Phase,
    opts: StepOptions,
    mut sampler: Option<&mut (dyn Sampler + '_)>,
) -> Result<(Var, LayerState)> {
    let (batch, _) = tape.value(proj).dims2()?;
    let (mut h_in, mut c_in) = (state.h, state.c);

    if eff.dropout {
        let keep = match phase {
            Phase::Train => {
                let s = sampler.as_deref_mut().ok_or_else(missing_sampler)?;
                let m = sample_mask(tape, eff.beta, batch, s);
                tape.rsub_scalar(1.0, m)
            }
            Phase::Infer => {
                let beta = tape.broadcast_rows(eff.beta, batch);
                tape.rsub_scalar(1.0, beta)
            }
        };
        h_in = tape.mul(keep, state.h)?;
        if opts.mask_cell_state {
            c_in = tape.mul(keep, state.c)?;
        }
    }

    let (h, c) = cell_from_projection(tape, proj, h_in, c_in, w_hh)?;

    let mut out = h;
    if eff.noise && phase == Phase::Train {
        let s = sampler.ok_or_else(missing_sampler)?;
        let eps = sample_noise(tape, eff.sigma, batch, s);
        out = tape.add(h, eps)?;
    }
    let next_h = if opts.noise_in_recurrence { out } else { h };
    Ok((out, LayerState { h: next_h, c }))
}

fn missing_sampler() -> Error {
    Error::InvalidConfig("training phase needs a random sampler".into())
}

/// Output of [`stacked_forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Top-layer output at each step, `[B×H]`.
    pub outs: Vec<Var>,
    /// Final state of each layer.
    pub final_state: Vec<LayerState>,
}

/// Runs all layers over the sequence `xs` (one `[B×|X|]` node per step) from a
/// zero state.
///
/// Layers are evaluated one after another over the full sequence, so random
/// draws are consumed layer-major, then by time step.
pub fn stacked_forward(
    tape: &mut Tape,
    xs: &[Var],
    vars: &ModelVars,
    mode: &VandMode,
    phase: Phase,
    opts: StepOptions,
    mut sampler: Option<&mut (dyn Sampler + '_)>,
) -> Result<ForwardOutput> {
    let effs: Vec<EffectiveParams> = vars
        .layers
        .iter()
        .map(|l| effective_params(tape, &l.vand, mode))
        .collect();
    stacked_forward_with(tape, xs, vars, &effs, phase, opts, sampler.as_deref_mut())
}

/// [`stacked_forward`] with caller-supplied effective noise scale and ratio per layer.
pub fn stacked_forward_with(
    tape: &mut Tape,
    xs: &[Var],
    vars: &ModelVars,
    effs: &[EffectiveParams],
    phase: Phase,
    opts: StepOptions,
    mut sampler: Option<&mut (dyn Sampler + '_)>,
) -> Result<ForwardOutput> {
    if xs.is_empty() {
        return Err(Error::InvalidConfig("sequence must have at least one step".into()));
    }
    assert_eq!(effs.len(), vars.layers.len());
    let (batch, _) = tape.value(xs[0]).dims2()?;
    for &x in xs {
        if tape.value(x).dims2()?.0 != batch {
            return Err(Error::ShapeMismatch {
                op: "stacked_forward",
                left: tape.value(xs[0]).shape().to_vec(),
                right: tape.value(x).shape().to_vec(),
            });
        }
    }
    let mut inputs: Vec<Var> = xs.to_vec();
    let mut final_state = Vec::with_capacity(vars.layers.len());
    for (l, (layer, eff)) in vars.layers.iter().zip(effs).enumerate() {
        let hidden = tape.value(layer.lstm.w_hh).shape()[1];
        let mut state = LayerState::zeros(tape, batch, hidden);
        let mut outs = Vec::with_capacity(inputs.len());
        // The input projection of every step in one product.
        let stacked = tape.concat_rows(&inputs)?;
        let proj_all = project_input(tape, stacked, &layer.lstm)?;
        for t in 0..inputs.len() {
            let proj = tape.slice_rows(proj_all, t * batch, batch)?;
            let (out, next) = step_from_projection(
                tape,
                proj,
                state,
                layer.lstm.w_hh,
                eff,
                phase,
                opts,
                sampler.as_deref_mut(),
            )?;
            if !tape.value(out).is_finite() || !tape.value(next.c).is_finite() {
                return Err(Error::NonFiniteActivation { step: t, layer: l });
            }
            outs.push(out);
            state = next;
        }
        final_state.push(state);
        inputs = outs;
    }
    Ok(ForwardOutput {
        outs: inputs,
        final_state,
    })
}

/// Registered parameters of one layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub lstm: LstmVars,
    pub vand: VandLayerVars,
}
