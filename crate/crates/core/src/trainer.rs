//! Training loop, evaluation, the mode-by-seed experiment matrix and the
//! per-unit regularizer analysis.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compute::{Tape, Tensor, Var};
use crate::data::{apply_norm, fit_norm, make_batch, Batch, Trajectory};
use crate::error::{Error, Result};
use crate::head::{gaussian_nll_sum, head_forward, mse};
use crate::optim::{zero_like_state, AdamConfig, Optimizer};
use crate::rnn::{stacked_forward, StackedModel, StepOptions};
use crate::vand::{ModeKind, Phase, RandomStream, VandMode};

/// Random streams of the run seed (stream 0 initializes weights).
const BATCH_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: ModeKind,
    /// Fixed noise scale / dropout ratio of the constant modes.
    pub const_value: f64,
    pub layers: usize,
    pub hidden: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Test-set evaluation cadence in epochs (0 evaluates only at the end).
    pub eval_every: usize,
    pub seed: u64,
    pub task: Option<String>,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub noise_in_recurrence: bool,
    pub mask_cell_state: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: ModeKind::Vand,
            const_value: crate::vand::DEFAULT_CONST_VALUE,
            layers: 2,
            hidden: 100,
            lr: 1e-3,
            batch_size: 50,
            epochs: 1000,
            steps_per_epoch: 1,
            eval_every: 50,
            seed: 0,
            task: None,
            train_data: None,
            test_data: None,
            noise_in_recurrence: false,
            mask_cell_state: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(Error::InvalidConfig(
                "epochs, batch_size, hidden and layers must all be at least 1".into(),
            ));
        }
        if self.steps_per_epoch == 0 {
            return Err(Error::InvalidConfig("steps_per_epoch must be at least 1".into()));
        }
        self.vand_mode()?;
        self.adam().validate()
    }

    pub fn vand_mode(&self) -> Result<VandMode> {
        VandMode::with_const_value(self.mode, self.const_value)
    }

    pub fn options(&self) -> StepOptions {
        StepOptions {
            noise_in_recurrence: self.noise_in_recurrence,
            mask_cell_state: self.mask_cell_state,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: TrainConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }
}

/// Test-set scores at one point of training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub epoch: usize,
    pub mse_norm: f64,
    pub mse_raw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub task: Option<String>,
    pub mode: ModeKind,
    pub seed: u64,
    /// Final test MSE on normalized targets; absent after divergence.
    pub mse_norm: Option<f64>,
    /// Final test MSE in data units; absent after divergence.
    pub mse_raw: Option<f64>,
    /// Mean training loss of each epoch.
    pub train_nll: Vec<f64>,
    pub eval_curve: Vec<EvalPoint>,
    pub optimizer_steps: u64,
    pub wall_s: f64,
    pub diverged: bool,
    /// Why the run stopped early, if it did.
    pub failure: Option<String>,
}

/// Sequence loss of one batch: per-step Gaussian NLL summed over time and
/// batch rows, divided by the batch size.
pub fn batch_loss(
    tape: &mut Tape,
    model: &StackedModel,
    vars: &crate::rnn::ModelVars,
    batch: &Batch,
    phase: Phase,
    sampler: Option<&mut RandomStream>,
) -> Result<Var> {
    let xs: Vec<Var> = (0..batch.steps()).map(|t| tape.constant(batch.x_step(t))).collect();
    let fwd = stacked_forward(
        tape,
        &xs,
        vars,
        &model.meta.mode,
        phase,
        model.meta.options,
        sampler.map(|s| s as &mut dyn crate::vand::Sampler),
    )?;
    let top = tape.concat_rows(&fwd.outs)?;
    let (mu, var) = head_forward(tape, top, &vars.head)?;
    let ys: Vec<Var> = (0..batch.steps()).map(|t| tape.constant(batch.y_step(t))).collect();
    let y = tape.concat_rows(&ys)?;
    gaussian_nll_sum(tape, mu, var, y, batch.batch_size() as f64)
}

fn check_dims(model: &StackedModel, data: &[Trajectory], what: &str) -> Result<()> {
    for t in data {
        if t.input_dim() != model.meta.input_dim || t.output_dim() != model.meta.output_dim {
            return Err(Error::InconsistentDims(format!(
                "{what} trajectory `{}` has dims {}/{}, model expects {}/{}",
                t.id,
                t.input_dim(),
                t.output_dim(),
                model.meta.input_dim,
                model.meta.output_dim
            )));
        }
    }
    Ok(())
}

fn is_divergence(e: &Error) -> bool {
    matches!(
        e,
        Error::NonFinite(_)
            | Error::NonFiniteActivation { .. }
            | Error::NonFiniteGradient(_)
            | Error::NonPositiveVariance
    )
}

/// Trains a fresh model on `train_set` and scores it on `test_set`.
///
/// Normalization statistics are fitted on `train_set` and stored in the
/// model. A non-finite loss, activation or gradient stops training and is
/// reported through `diverged`; the partially trained model is returned.
pub fn train(
    config: &TrainConfig,
    train_set: &[Trajectory],
    test_set: &[Trajectory],
) -> Result<(StackedModel, ConditionResult)> {
    config.validate()?;
    let first = train_set.first().ok_or(Error::EmptyDataset)?;
    let mut model = StackedModel::new(
        first.input_dim(),
        first.output_dim(),
        config.hidden,
        config.layers,
        config.vand_mode()?,
        config.options(),
        config.seed,
    );
    model.meta.task = config.task.clone();
    check_dims(&model, train_set, "training")?;
    check_dims(&model, test_set, "test")?;
    model.norm = fit_norm(train_set)?;
    let normed: Vec<Trajectory> = train_set.iter().map(|t| apply_norm(t, &model.norm)).collect();

    let start = Instant::now();
    let mut batch_rng = RandomStream::split(config.seed, BATCH_STREAM);
    let mut noise_rng = RandomStream::split(config.seed, NOISE_STREAM);
    let mut opt = {
        let params: Vec<Tensor> = model.trainable_mut().into_iter().map(|(_, t)| t.clone()).collect();
        zero_like_state(params.iter(), config.adam())
    };

    let mut result = ConditionResult {
        task: config.task.clone(),
        mode: config.mode,
        seed: config.seed,
        mse_norm: None,
        mse_raw: None,
        train_nll: Vec::with_capacity(config.epochs),
        eval_curve: Vec::new(),
        optimizer_steps: 0,
        wall_s: 0.0,
        diverged: false,
        failure: None,
    };

    'epochs: for epoch in 1..=config.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..config.steps_per_epoch {
            let batch = make_batch(&normed, config.batch_size, &mut batch_rng)?;
            match train_step(&mut model, &batch, &mut noise_rng, &mut opt) {
                Ok(loss) => epoch_loss += loss,
                Err(e) if is_divergence(&e) => {
                    result.diverged = true;
                    result.failure = Some(format!("epoch {epoch}: {e}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            result.optimizer_steps += 1;
        }
        result.train_nll.push(epoch_loss / config.steps_per_epoch as f64);
        let due = config.eval_every > 0 && epoch % config.eval_every == 0;
        if (due || epoch == config.epochs) && !test_set.is_empty() {
            match evaluate(&model, test_set) {
                Ok((mse_norm, mse_raw)) => result.eval_curve.push(EvalPoint {
                    epoch,
                    mse_norm,
                    mse_raw,
                }),
                Err(e) if is_divergence(&e) => {
                    result.diverged = true;
                    result.failure = Some(format!("evaluation at epoch {epoch}: {e}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
    }

    if !result.diverged {
        if let Some(last) = result.eval_curve.last() {
            result.mse_norm = Some(last.mse_norm);
            result.mse_raw = Some(last.mse_raw);
        }
    }
    result.wall_s = start.elapsed().as_secs_f64();
    Ok((model, result))
}

/// One optimizer step on `batch`. Returns the loss before the update.
pub fn train_step(
    model: &mut StackedModel,
    batch: &Batch,
    noise_rng: &mut RandomStream,
    opt: &mut dyn Optimizer,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, true);
    let loss = batch_loss(&mut tape, model, &vars, batch, Phase::Train, Some(noise_rng))?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss {value}")));
    }
    let mut grads = tape.backward(loss)?;
    let grads: Vec<Tensor> = vars
        .trainable
        .iter()
        .map(|(_, v)| grads.take(*v).expect("every trainable leaf has a gradient"))
        .collect();
    let mut params = model.trainable_mut();
    opt.step(&mut params, &grads)?;
    Ok(value)
}

/// Teacher-forced inference-mode MSE of the predicted mean, on normalized
/// targets and in data units, over every step of every trajectory.
pub fn evaluate(model: &StackedModel, test_set: &[Trajectory]) -> Result<(f64, f64)> {
    if test_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_dims(model, test_set, "test")?;
    let (mut se_norm, mut se_raw, mut n) = (0.0, 0.0, 0usize);
    for traj in test_set {
        let normed = apply_norm(traj, &model.norm);
        let xs: Vec<Tensor> = (0..normed.len())
            .map(|r| Tensor::matrix(1, normed.input_dim(), normed.x.row(r).to_vec()).unwrap())
            .collect();
        let mus = model.predict(&xs)?;
        for (r, mu) in mus.iter().enumerate() {
            let y_norm = Tensor::vector(normed.y.row(r).to_vec());
            let mu_norm = Tensor::vector(mu.data().to_vec());
            let k = mu.len();
            se_norm += mse(&mu_norm, &y_norm)? * k as f64;
            let raw = Tensor::vector(model.norm.denormalize_y(mu.data()));
            se_raw += mse(&raw, &Tensor::vector(traj.y.row(r).to_vec()))? * k as f64;
            n += k;
        }
    }
    Ok((se_norm / n as f64, se_raw / n as f64))
}

/// File name of the model saved for one matrix cell.
pub fn model_file_name(task: &str, mode: ModeKind, seed: u64) -> String {
    format!("{task}_{mode}_{seed}.model.json")
}

/// Trains every `(mode, seed)` pair on `workers` threads. Rows come back in
/// mode-major, seed-minor order regardless of scheduling. A failed run is
/// recorded with empty scores and the matrix continues.
pub fn run_matrix(
    base: &TrainConfig,
    train_set: &[Trajectory],
    test_set: &[Trajectory],
    modes: &[ModeKind],
    seeds: &[u64],
    workers: usize,
    model_dir: Option<&Path>,
) -> Result<Vec<ConditionResult>> {
    if modes.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidConfig("matrix needs at least one mode and one seed".into()));
    }
    base.validate()?;
    let cells: Vec<(ModeKind, u64)> = modes
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let task = base.task.clone().unwrap_or_else(|| "task".into());
    let run_cell = |&(mode, seed): &(ModeKind, u64)| -> ConditionResult {
        let config = TrainConfig {
            mode,
            seed,
            ..base.clone()
        };
        let outcome = train(&config, train_set, test_set).and_then(|(model, res)| {
            if let Some(dir) = model_dir {
                model.save(dir.join(model_file_name(&task, mode, seed)))?;
            }
            Ok(res)
        });
        outcome.unwrap_or_else(|e| ConditionResult {
            task: base.task.clone(),
            mode,
            seed,
            mse_norm: None,
            mse_raw: None,
            train_nll: Vec::new(),
            eval_curve: Vec::new(),
            optimizer_steps: 0,
            wall_s: 0.0,
            diverged: false,
            failure: Some(e.to_string()),
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(pool.install(|| cells.par_iter().map(run_cell).collect()))
}

/// Writes `task,mode,seed,mse_norm,mse_raw,diverged,wall_s`. Scores are
/// empty for runs without a final evaluation.
pub fn write_results_csv<W: Write>(out: W, rows: &[ConditionResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["task", "mode", "seed", "mse_norm", "mse_raw", "diverged", "wall_s"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.task.clone().unwrap_or_default(),
            r.mode.to_string(),
            r.seed.to_string(),
            opt(r.mse_norm),
            opt(r.mse_raw),
            r.diverged.to_string(),
            format!("{:.3}", r.wall_s),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Median final normalized MSE per mode, ascending. Runs without a score are
/// left out of the median; `n` counts the scored runs.
pub fn median_table(rows: &[ConditionResult]) -> Vec<(ModeKind, f64, usize, usize)> {
    let mut table = Vec::new();
    for kind in ModeKind::ALL {
        let of_mode: Vec<&ConditionResult> = rows.iter().filter(|r| r.mode == kind).collect();
        if of_mode.is_empty() {
            continue;
        }
        let mut scores: Vec<f64> = of_mode.iter().filter_map(|r| r.mse_norm).collect();
        let diverged = of_mode.iter().filter(|r| r.diverged).count();
        let med = if scores.is_empty() {
            f64::INFINITY
        } else {
            scores.sort_by(f64::total_cmp);
            quantile(&scores, 0.5)
        };
        table.push((kind, med, scores.len(), diverged));
    }
    table.sort_by(|a, b| a.1.total_cmp(&b.1));
    table
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// One row of the regularizer analysis.
#[derive(Debug, Clone, PartialEq)]
pub enum AnalysisRow {
    Unit { layer: usize, unit: usize, sigma: f64, beta: f64 },
    /// Per-layer medians and interquartile ranges.
    Summary { layer: usize, sigma_median: f64, beta_median: f64, sigma_iqr: f64, beta_iqr: f64 },
}

/// Effective per-unit noise scale and dropout ratio of each layer. A
/// regularizer the mode does not use is reported as 0.
pub fn analyze_params(model: &StackedModel) -> Result<Vec<AnalysisRow>> {
    let kind = model.meta.mode.kind;
    if !(kind.learns_scale() || kind.learns_ratio()) {
        return Err(Error::NoLearnableRegularizers(kind.to_string()));
    }
    let mut rows = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        let h = layer.vand.width();
        let sigma = if kind.has_noise() { layer.vand.sigma() } else { vec![0.0; h] };
        let beta = if kind.has_dropout() { layer.vand.beta() } else { vec![0.0; h] };
        for u in 0..h {
            rows.push(AnalysisRow::Unit {
                layer: l,
                unit: u,
                sigma: sigma[u],
                beta: beta[u],
            });
        }
        let (mut s, mut b) = (sigma, beta);
        s.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        rows.push(AnalysisRow::Summary {
            layer: l,
            sigma_median: quantile(&s, 0.5),
            beta_median: quantile(&b, 0.5),
            sigma_iqr: quantile(&s, 0.75) - quantile(&s, 0.25),
            beta_iqr: quantile(&b, 0.75) - quantile(&b, 0.25),
        });
    }
    Ok(rows)
}

/// Writes `kind,layer,unit,sigma,beta,sigma_iqr,beta_iqr`. Unit rows have
/// kind `unit` and empty IQR fields; summary rows have kind `median`, an
/// empty unit field and the per-layer medians in `sigma`/`beta`.
pub fn write_analysis_csv<W: Write>(out: W, rows: &[AnalysisRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["kind", "layer", "unit", "sigma", "beta", "sigma_iqr", "beta_iqr"])?;
    for r in rows {
        match *r {
            AnalysisRow::Unit { layer, unit, sigma, beta } => w.write_record([
                "unit".to_string(),
                layer.to_string(),
                unit.to_string(),
                sigma.to_string(),
                beta.to_string(),
                String::new(),
                String::new(),
            ])?,
            AnalysisRow::Summary {
                layer,
                sigma_median,
                beta_median,
                sigma_iqr,
                beta_iqr,
            } => w.write_record([
                "median".to_string(),
                layer.to_string(),
                String::new(),
                sigma_median.to_string(),
                beta_median.to_string(),
                sigma_iqr.to_string(),
                beta_iqr.to_string(),
            ])?,
        }
    }
    w.flush()?;
    Ok(())
}
