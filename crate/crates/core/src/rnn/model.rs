use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{stacked_forward, vand_layer_step, LayerState, LayerVars, LstmLayerParams, LstmVars, StepOptions};
use crate::compute::{Tape, Tensor, Var};
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::head::{head_forward, GaussianHeadParams, HeadVars};
use crate::vand::{effective_params, Phase, RandomStream, VandLayerParams, VandLayerVars, VandMode};

/// Version tag written into every model file.
pub const FORMAT_VERSION: u32 = 1;

/// Stream of the run seed reserved for weight initialization.
const INIT_STREAM: u64 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub mode: VandMode,
    #[serde(default)]
    pub options: StepOptions,
    #[serde(default)]
    pub task: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub lstm: LstmLayerParams,
    pub vand: VandLayerParams,
}

/// Stacked LSTM with per-layer regularizers, a Gaussian head and the
/// normalization statistics of its training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedModel {
    pub format_version: u32,
    pub meta: ModelMeta,
    pub layers: Vec<LayerParams>,
    pub head: GaussianHeadParams,
    pub norm: NormStats,
}

/// Model parameters registered on a tape.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub layers: Vec<LayerVars>,
    pub head: HeadVars,
    /// Leaves that receive gradients, in [`StackedModel::parameters`] order.
    pub trainable: Vec<(String, Var)>,
}

/// Per-layer hidden and cell state carried between single inference steps.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub h: Vec<Tensor>,
    pub c: Vec<Tensor>,
}

impl RecurrentState {
    pub fn zeros(model: &StackedModel, batch: usize) -> Self {
        let z = Tensor::zeros(&[batch, model.meta.hidden]);
        Self {
            h: vec![z.clone(); model.meta.layers],
            c: vec![z; model.meta.layers],
        }
    }
}

impl StackedModel {
    pub fn new(
        input_dim: usize,
        output_dim: usize,
        hidden: usize,
        layers: usize,
        mode: VandMode,
        options: StepOptions,
        seed: u64,
    ) -> Self {
        let mut rng = RandomStream::split(seed, INIT_STREAM);
        let layers_params = (0..layers)
            .map(|l| LayerParams {
                lstm: LstmLayerParams::init(if l == 0 { input_dim } else { hidden }, hidden, &mut rng),
                vand: VandLayerParams::new(hidden),
            })
            .collect();
        let head = GaussianHeadParams::init(hidden, output_dim, &mut rng);
        Self {
            format_version: FORMAT_VERSION,
            meta: ModelMeta {
                input_dim,
                output_dim,
                hidden,
                layers,
                mode,
                options,
                task: None,
            },
            layers: layers_params,
            head,
            norm: NormStats::identity(input_dim, output_dim),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(self.format_version));
        }
        let m = &self.meta;
        m.mode.validate()?;
        if m.layers == 0 || m.hidden == 0 || m.input_dim == 0 || m.output_dim == 0 {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        if self.layers.len() != m.layers {
            return Err(Error::InconsistentDims(format!(
                "meta declares {} layers, file holds {}",
                m.layers,
                self.layers.len()
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let d_in = if l == 0 { m.input_dim } else { m.hidden };
            layer.lstm.validate(d_in, m.hidden)?;
            layer.vand.validate(m.hidden)?;
        }
        self.head.validate(m.hidden, m.output_dim)?;
        if self.norm.input_dim() != m.input_dim || self.norm.output_dim() != m.output_dim {
            return Err(Error::InconsistentDims("normalization statistics".into()));
        }
        Ok(())
    }

    /// Whether the named parameter is updated by the optimizer in this model's mode.
    pub fn is_trainable(&self, name: &str) -> bool {
        if name.ends_with("sigma_real") {
            self.meta.mode.kind.learns_scale()
        } else if name.ends_with("beta_real") {
            self.meta.mode.kind.learns_ratio()
        } else {
            true
        }
    }

    /// Every parameter with a stable dotted name.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.w_ih"), &layer.lstm.w_ih));
            out.push((format!("layers.{l}.w_hh"), &layer.lstm.w_hh));
            out.push((format!("layers.{l}.bias"), &layer.lstm.bias));
            out.push((format!("layers.{l}.sigma_real"), &layer.vand.sigma_real));
            out.push((format!("layers.{l}.beta_real"), &layer.vand.beta_real));
        }
        out.push(("head.w_mu".into(), &self.head.w_mu));
        out.push(("head.b_mu".into(), &self.head.b_mu));
        out.push(("head.w_var".into(), &self.head.w_var));
        out.push(("head.b_var".into(), &self.head.b_var));
        out
    }

    /// Mutable view of the trainable parameters, in [`Self::parameters`] order.
    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let (scale, ratio) = (
            self.meta.mode.kind.learns_scale(),
            self.meta.mode.kind.learns_ratio(),
        );
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{l}.w_ih"), &mut layer.lstm.w_ih));
            out.push((format!("layers.{l}.w_hh"), &mut layer.lstm.w_hh));
            out.push((format!("layers.{l}.bias"), &mut layer.lstm.bias));
            if scale {
                out.push((format!("layers.{l}.sigma_real"), &mut layer.vand.sigma_real));
            }
            if ratio {
                out.push((format!("layers.{l}.beta_real"), &mut layer.vand.beta_real));
            }
        }
        out.push(("head.w_mu".into(), &mut self.head.w_mu));
        out.push(("head.b_mu".into(), &mut self.head.b_mu));
        out.push(("head.w_var".into(), &mut self.head.w_var));
        out.push(("head.b_var".into(), &mut self.head.b_var));
        out
    }

    /// Registers parameters on `tape`: trainable ones as leaves when
    /// `with_grad`, everything else as constants.
    pub fn register(&self, tape: &mut Tape, with_grad: bool) -> ModelVars {
        let mut trainable = Vec::new();
        let mut reg = |tape: &mut Tape, name: String, t: &Tensor| -> Var {
            if with_grad && self.is_trainable(&name) {
                let v = tape.leaf(t.clone());
                trainable.push((name, v));
                v
            } else {
                tape.constant(t.clone())
            }
        };
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let lstm = LstmVars {
                w_ih: reg(tape, format!("layers.{l}.w_ih"), &layer.lstm.w_ih),
                w_hh: reg(tape, format!("layers.{l}.w_hh"), &layer.lstm.w_hh),
                bias: reg(tape, format!("layers.{l}.bias"), &layer.lstm.bias),
            };
            let vand = VandLayerVars {
                sigma_real: reg(tape, format!("layers.{l}.sigma_real"), &layer.vand.sigma_real),
                beta_real: reg(tape, format!("layers.{l}.beta_real"), &layer.vand.beta_real),
            };
            layers.push(LayerVars { lstm, vand });
        }
        let head = HeadVars {
            w_mu: reg(tape, "head.w_mu".into(), &self.head.w_mu),
            b_mu: reg(tape, "head.b_mu".into(), &self.head.b_mu),
            w_var: reg(tape, "head.w_var".into(), &self.head.w_var),
            b_var: reg(tape, "head.b_var".into(), &self.head.b_var),
        };
        ModelVars {
            layers,
            head,
            trainable,
        }
    }

    /// Inference-mode predicted means for a normalized time-major sequence
    /// (`xs[t]` is `[B×|X|]`). Returns one `[B×|Y|]` mean per step.
    pub fn predict(&self, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let inputs: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let fwd = stacked_forward(
            &mut tape,
            &inputs,
            &vars,
            &self.meta.mode,
            Phase::Infer,
            self.meta.options,
            None,
        )?;
        let top = tape.concat_rows(&fwd.outs)?;
        let (mu, _) = head_forward(&mut tape, top, &vars.head)?;
        let mu = tape.value(mu);
        let (rows, d) = mu.dims2()?;
        let b = rows / xs.len();
        Ok((0..xs.len())
            .map(|t| Tensor::matrix(b, d, mu.data()[t * b * d..(t + 1) * b * d].to_vec()).unwrap())
            .collect())
    }

    /// One inference step from a normalized input row batch `[B×|X|]`,
    /// advancing `state`. Returns the predicted mean and variance.
    pub fn infer_step(&self, x: &Tensor, state: &mut RecurrentState) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let mut input = tape.constant(x.clone());
        for (l, layer) in vars.layers.iter().enumerate() {
            let eff = effective_params(&mut tape, &layer.vand, &self.meta.mode);
            let st = LayerState {
                h: tape.constant(state.h[l].clone()),
                c: tape.constant(state.c[l].clone()),
            };
            let (out, next) = vand_layer_step(
                &mut tape,
                input,
                st,
                &layer.lstm,
                &eff,
                Phase::Infer,
                self.meta.options,
                None,
            )?;
            if !tape.value(out).is_finite() {
                return Err(Error::NonFiniteActivation { step: 0, layer: l });
            }
            state.h[l] = tape.value(next.h).clone();
            state.c[l] = tape.value(next.c).clone();
            input = out;
        }
        let (mu, var) = head_forward(&mut tape, input, &vars.head)?;
        Ok((tape.value(mu).clone(), tape.value(var).clone()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: StackedModel = serde_json::from_str(s)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
