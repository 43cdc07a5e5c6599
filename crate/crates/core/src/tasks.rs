//! Synthetic trajectory tasks and closed-loop rollout.
//!
//! * `sequential`: a point mass visits a fixed program of waypoints, pausing
//!   at each. The path crosses itself, so the right command at the crossing
//!   (and at every pause point) depends on how far the program has advanced.
//! * `periodic`: the van der Pol oscillator, whose attracting limit cycle has
//!   to be reproduced from increments.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compute::Tensor;
use crate::data::Trajectory;
use crate::error::{Error, Result};
use crate::rnn::{RecurrentState, StackedModel};
use crate::vand::{RandomStream, Sampler};

/// Shortest trajectory either generator accepts.
pub const MIN_STEPS: usize = 100;
/// Distance covered per step of the sequential task.
pub const SEQ_SPEED: f64 = 0.02;
/// Steps spent at each waypoint.
pub const SEQ_DWELL: usize = 30;
/// Number of waypoints in a sequential program.
pub const SEQ_WAYPOINTS: usize = 5;
/// Maximum per-trajectory displacement of program points.
pub const SEQ_JITTER: f64 = 0.05;
/// Van der Pol damping.
pub const VDP_MU: f64 = 1.0;
/// Integration step of the periodic task.
pub const VDP_DT: f64 = 0.05;

const MAX_PROGRAM_TRIES: usize = 1000;
const PROGRAM_STREAM: u64 = 1 << 40;
const PROBE_STREAM: u64 = 1 << 41;
const PROBE_COUNT: usize = 4;
/// Rollout states farther than this many training standard deviations from
/// the training mean count as divergent.
pub const DIVERGENCE_STDS: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Sequential,
    Periodic,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Sequential => "sequential",
            TaskKind::Periodic => "periodic",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(TaskKind::Sequential),
            "periodic" => Ok(TaskKind::Periodic),
            other => Err(Error::InvalidConfig(format!(
                "unknown task `{other}` (expected sequential or periodic)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub steps: usize,
    /// Standard deviation of the Gaussian observation noise.
    pub obs_noise: f64,
    pub seed: u64,
    /// Seed of the shared waypoint program (sequential only).
    #[serde(default)]
    pub program_seed: u64,
}

impl TaskSpec {
    pub fn sequential(steps: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::Sequential,
            steps,
            obs_noise: 0.01,
            seed,
            program_seed: 0,
        }
    }

    pub fn periodic(steps: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::Periodic,
            steps,
            obs_noise: 0.02,
            seed,
            program_seed: 0,
        }
    }

    pub fn new(kind: TaskKind, steps: usize, seed: u64) -> Self {
        match kind {
            TaskKind::Sequential => Self::sequential(steps, seed),
            TaskKind::Periodic => Self::periodic(steps, seed),
        }
    }

    pub fn input_dim(&self) -> usize {
        2
    }

    pub fn output_dim(&self) -> usize {
        2
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < MIN_STEPS {
            return Err(Error::InvalidConfig(format!(
                "steps must be at least {MIN_STEPS}, got {}",
                self.steps
            )));
        }
        if !(self.obs_noise >= 0.0 && self.obs_noise.is_finite()) {
            return Err(Error::InvalidConfig("observation noise must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Generates `n` trajectories for `spec`.
pub fn generate(spec: &TaskSpec, n: usize) -> Result<Vec<Trajectory>> {
    spec.validate()?;
    match spec.kind {
        TaskKind::Sequential => {
            let program = SequentialProgram::draw(spec.program_seed)?;
            let data: Vec<Trajectory> = (0..n)
                .map(|i| simulate_sequential(&program, spec, i as u64 + 1, format!("seq-{}-{i}", spec.seed)).0)
                .collect();
            if n > 0 {
                let report = ambiguity_check(&program, spec, &data)?;
                if report.ratio() < 2.0 {
                    return Err(Error::InvalidConfig(format!(
                        "sequential data lacks the memory dependency: memoryless/phase MSE ratio {:.3}",
                        report.ratio()
                    )));
                }
            }
            Ok(data)
        }
        TaskKind::Periodic => Ok((0..n).map(|i| simulate_periodic(spec, i as u64 + 1, i)).collect()),
    }
}

pub fn gen_sequential(n_traj: usize, steps: usize, seed: u64) -> Result<Vec<Trajectory>> {
    generate(&TaskSpec::sequential(steps, seed), n_traj)
}

pub fn gen_periodic(n_traj: usize, steps: usize, seed: u64) -> Result<Vec<Trajectory>> {
    generate(&TaskSpec::periodic(steps, seed), n_traj)
}

// ---------------------------------------------------------------------------
// Sequential task

/// Start point and waypoints shared by every trajectory of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SequentialProgram {
    pub start: [f64; 2],
    pub waypoints: Vec<[f64; 2]>,
}

/// What the point mass is doing at a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqPhase {
    /// Heading to waypoint `k`.
    Moving(usize),
    /// Pausing at waypoint `k`.
    Dwell(usize),
    /// Program finished.
    Hold,
}

impl SequentialProgram {
    /// Rejection-samples a program whose path crosses itself.
    pub fn draw(program_seed: u64) -> Result<Self> {
        let mut rng = RandomStream::split(program_seed, PROGRAM_STREAM);
        for _ in 0..MAX_PROGRAM_TRIES {
            let mut point = || [rng.rng().random_range(-1.0..1.0), rng.rng().random_range(-1.0..1.0)];
            let start = point();
            let waypoints: Vec<[f64; 2]> = (0..SEQ_WAYPOINTS).map(|_| point()).collect();
            let p = SequentialProgram { start, waypoints };
            if p.self_intersects() {
                return Ok(p);
            }
        }
        Err(Error::RejectionFailed(MAX_PROGRAM_TRIES))
    }

    fn polyline(&self) -> Vec<[f64; 2]> {
        std::iter::once(self.start).chain(self.waypoints.iter().copied()).collect()
    }

    /// Whether two non-adjacent legs of the path cross.
    pub fn self_intersects(&self) -> bool {
        let pts = self.polyline();
        let legs = pts.len() - 1;
        (0..legs).any(|i| {
            (i + 2..legs).any(|j| segments_cross(pts[i], pts[i + 1], pts[j], pts[j + 1]))
        })
    }

    /// Steps needed to finish the program from the start point.
    pub fn duration(&self) -> usize {
        let pts = self.polyline();
        pts.windows(2)
            .map(|w| (dist(w[0], w[1]) / SEQ_SPEED).ceil() as usize + SEQ_DWELL)
            .sum()
    }

    fn jittered(&self, rng: &mut RandomStream) -> Self {
        let mut j = |p: [f64; 2]| {
            [
                p[0] + rng.rng().random_range(-SEQ_JITTER..SEQ_JITTER),
                p[1] + rng.rng().random_range(-SEQ_JITTER..SEQ_JITTER),
            ]
        };
        let start = j(self.start);
        let waypoints = self.waypoints.iter().map(|&w| j(w)).collect();
        Self { start, waypoints }
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn segments_cross(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

/// Runs one jittered copy of `program` for `spec.steps` steps. Randomness comes
/// from stream `stream` of `spec.seed`.
pub fn simulate_sequential(
    program: &SequentialProgram,
    spec: &TaskSpec,
    stream: u64,
    id: String,
) -> (Trajectory, Vec<SeqPhase>) {
    let mut rng = RandomStream::split(spec.seed, stream);
    let local = program.jittered(&mut rng);
    let steps = spec.steps;
    let mut pos = local.start;
    let mut k = 0usize;
    let mut dwell_left = 0usize;
    let mut xs = Vec::with_capacity(steps * 2);
    let mut ys = Vec::with_capacity(steps * 2);
    let mut phases = Vec::with_capacity(steps);
    for _ in 0..steps {
        let noise = rng.standard_normal(2);
        xs.push(pos[0] + spec.obs_noise * noise[0]);
        xs.push(pos[1] + spec.obs_noise * noise[1]);
        if k >= local.waypoints.len() {
            phases.push(SeqPhase::Hold);
            ys.extend([0.0, 0.0]);
        } else if dwell_left > 0 {
            phases.push(SeqPhase::Dwell(k - 1));
            ys.extend([0.0, 0.0]);
            dwell_left -= 1;
        } else {
            let target = local.waypoints[k];
            let d = dist(target, pos);
            let dir = [(target[0] - pos[0]) / d, (target[1] - pos[1]) / d];
            phases.push(SeqPhase::Moving(k));
            ys.extend(dir);
            if d <= SEQ_SPEED {
                pos = target;
                k += 1;
                dwell_left = SEQ_DWELL;
            } else {
                pos = [pos[0] + SEQ_SPEED * dir[0], pos[1] + SEQ_SPEED * dir[1]];
            }
        }
    }
    let traj = Trajectory::new(
        id,
        Tensor::matrix(steps, 2, xs).unwrap(),
        Tensor::matrix(steps, 2, ys).unwrap(),
    )
    .unwrap();
    (traj, phases)
}

/// Test MSE of the two reference predictors on held-out trajectories.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmbiguityReport {
    /// 1-nearest-neighbour predictor fit on the observation/label pairs.
    pub memoryless_mse: f64,
    /// Predictor that knows the phase index and the program waypoints.
    pub phase_mse: f64,
}

impl AmbiguityReport {
    pub fn ratio(&self) -> f64 {
        self.memoryless_mse / self.phase_mse.max(f64::MIN_POSITIVE)
    }
}

/// Command an observer predicts from the phase index and an observed position.
pub fn phase_oracle(program: &SequentialProgram, phase: SeqPhase, x: [f64; 2]) -> [f64; 2] {
    match phase {
        SeqPhase::Moving(k) => {
            let t = program.waypoints[k];
            let d = dist(t, x).max(1e-12);
            [(t[0] - x[0]) / d, (t[1] - x[1]) / d]
        }
        SeqPhase::Dwell(_) | SeqPhase::Hold => [0.0, 0.0],
    }
}

/// Label of the training pair whose observation is closest to `x`.
pub fn nearest_neighbour(train: &[Trajectory], x: &[f64]) -> Vec<f64> {
    let mut best = f64::INFINITY;
    let mut label: &[f64] = &[];
    for t in train {
        for r in 0..t.len() {
            let row = t.x.row(r);
            let d: f64 = row.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best {
                best = d;
                label = t.y.row(r);
            }
        }
    }
    label.to_vec()
}

/// Fits the memoryless predictor on `train` and scores both predictors on
/// probe trajectories drawn from a stream of `spec.seed` disjoint from the
/// training streams.
pub fn ambiguity_check(program: &SequentialProgram, spec: &TaskSpec, train: &[Trajectory]) -> Result<AmbiguityReport> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (mut se_mem, mut se_phase, mut n) = (0.0, 0.0, 0usize);
    for j in 0..PROBE_COUNT {
        let (probe, phases) = simulate_sequential(program, spec, PROBE_STREAM + j as u64, format!("probe-{j}"));
        for (r, &phase) in phases.iter().enumerate() {
            let x = probe.x.row(r);
            let y = probe.y.row(r);
            let mem = nearest_neighbour(train, x);
            let orc = phase_oracle(program, phase, [x[0], x[1]]);
            for d in 0..2 {
                se_mem += (mem[d] - y[d]).powi(2);
                se_phase += (orc[d] - y[d]).powi(2);
            }
            n += 2;
        }
    }
    Ok(AmbiguityReport {
        memoryless_mse: se_mem / n as f64,
        phase_mse: se_phase / n as f64,
    })
}

// ---------------------------------------------------------------------------
// Periodic task

/// Van der Pol vector field in first-order form.
pub fn vdp_field(s: [f64; 2]) -> [f64; 2] {
    [s[1], VDP_MU * (1.0 - s[0] * s[0]) * s[1] - s[0]]
}

/// One classical Runge-Kutta step.
pub fn rk4_step(s: [f64; 2], dt: f64) -> [f64; 2] {
    let add = |a: [f64; 2], b: [f64; 2], h: f64| [a[0] + h * b[0], a[1] + h * b[1]];
    let k1 = vdp_field(s);
    let k2 = vdp_field(add(s, k1, dt / 2.0));
    let k3 = vdp_field(add(s, k2, dt / 2.0));
    let k4 = vdp_field(add(s, k3, dt));
    [
        s[0] + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        s[1] + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
    ]
}

/// Clean increment over one step of the periodic task.
pub fn vdp_increment(s: [f64; 2]) -> [f64; 2] {
    let n = rk4_step(s, VDP_DT);
    [n[0] - s[0], n[1] - s[1]]
}

fn simulate_periodic(spec: &TaskSpec, stream: u64, index: usize) -> Trajectory {
    let mut rng = RandomStream::split(spec.seed, stream);
    let radius = rng.rng().random_range(1.0..2.5);
    let angle = rng.rng().random_range(0.0..std::f64::consts::TAU);
    let mut s = [radius * angle.cos(), radius * angle.sin()];
    let steps = spec.steps;
    let mut xs = Vec::with_capacity(steps * 2);
    let mut ys = Vec::with_capacity(steps * 2);
    for _ in 0..steps {
        let noise = rng.standard_normal(2);
        xs.push(s[0] + spec.obs_noise * noise[0]);
        xs.push(s[1] + spec.obs_noise * noise[1]);
        let y = vdp_increment(s);
        ys.extend(y);
        // Accumulating the label keeps x[t+1] = x[t] + y[t] exact without noise.
        s = [s[0] + y[0], s[1] + y[1]];
    }
    Trajectory::new(
        format!("per-{}-{index}", spec.seed),
        Tensor::matrix(steps, 2, xs).unwrap(),
        Tensor::matrix(steps, 2, ys).unwrap(),
    )
    .unwrap()
}

// ---------------------------------------------------------------------------
// Rollout

/// A next-increment (or next-command) predictor in raw data units.
pub trait Predictor {
    /// Clears any internal state.
    fn reset(&mut self);
    /// Prediction for observation `x` given everything seen since the last reset.
    fn predict(&mut self, x: &[f64]) -> Result<Vec<f64>>;
}

/// Step-wise inference with a trained model, normalizing inputs and
/// denormalizing predicted means.
pub struct ModelPredictor<'a> {
    model: &'a StackedModel,
    state: RecurrentState,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(model: &'a StackedModel) -> Self {
        Self {
            model,
            state: RecurrentState::zeros(model, 1),
        }
    }
}

impl Predictor for ModelPredictor<'_> {
    fn reset(&mut self) {
        self.state = RecurrentState::zeros(self.model, 1);
    }

    fn predict(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        let xn = self.model.norm.normalize_x(x);
        let input = Tensor::matrix(1, xn.len(), xn)?;
        let (mu, _) = self.model.infer_step(&input, &mut self.state)?;
        Ok(self.model.norm.denormalize_y(mu.data()))
    }
}

/// Exact periodic-task dynamics as a predictor.
pub struct VdpOracle;

impl Predictor for VdpOracle {
    fn reset(&mut self) {}

    fn predict(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(vdp_increment([x[0], x[1]]).to_vec())
    }
}

/// Closed-loop rollout result. Row `t` of `states` is the state reached after
/// applying `predictions[t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub states: Vec<Vec<f64>>,
    pub predictions: Vec<Vec<f64>>,
    pub diverged: bool,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Whether every state lies within `factor` times the per-dimension range
    /// `[lo, hi]`, centred on the range midpoint.
    pub fn within_range(&self, lo: &[f64], hi: &[f64], factor: f64) -> bool {
        self.states.iter().all(|s| {
            s.iter().enumerate().all(|(d, &v)| {
                let mid = 0.5 * (lo[d] + hi[d]);
                (v - mid).abs() <= 0.5 * factor * (hi[d] - lo[d])
            })
        })
    }
}

/// Per-dimension minimum and maximum of the observations of `data`.
pub fn observation_range(data: &[Trajectory]) -> (Vec<f64>, Vec<f64>) {
    let dim = data.first().map(|t| t.input_dim()).unwrap_or(0);
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for t in data {
        for row in t.x.data().chunks(dim) {
            for d in 0..dim {
                lo[d] = lo[d].min(row[d]);
                hi[d] = hi[d].max(row[d]);
            }
        }
    }
    (lo, hi)
}

/// Teacher-forces `prefix`, then runs `horizon` closed-loop steps.
///
/// Periodic: `state += prediction`. Sequential: `state += SEQ_SPEED · prediction`.
/// A non-finite state, or one farther than `bound` from `center` in any
/// dimension, ends the rollout with `diverged` set; the offending step is not
/// recorded.
pub fn rollout_with(
    predictor: &mut dyn Predictor,
    kind: TaskKind,
    horizon: usize,
    prefix: &Trajectory,
    center: &[f64],
    bound: &[f64],
) -> Result<Rollout> {
    let mut out = Rollout {
        states: Vec::with_capacity(horizon),
        predictions: Vec::with_capacity(horizon),
        diverged: false,
    };
    if horizon == 0 {
        return Ok(out);
    }
    if prefix.is_empty() {
        return Err(Error::InvalidConfig("rollout needs a non-empty prefix".into()));
    }
    let gain = match kind {
        TaskKind::Periodic => 1.0,
        TaskKind::Sequential => SEQ_SPEED,
    };
    predictor.reset();
    let mut pred = Vec::new();
    for r in 0..prefix.len() {
        pred = predictor.predict(prefix.x.row(r))?;
    }
    let mut state = prefix.x.row(prefix.len() - 1).to_vec();
    for t in 0..horizon {
        if t > 0 {
            pred = match predictor.predict(&state) {
                Ok(p) => p,
                Err(Error::NonFiniteActivation { .. }) => {
                    out.diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            };
        }
        let next: Vec<f64> = state.iter().zip(&pred).map(|(s, p)| s + gain * p).collect();
        let escaped = next
            .iter()
            .enumerate()
            .any(|(d, v)| !v.is_finite() || (v - center[d]).abs() > bound[d]);
        if escaped || pred.iter().any(|p| !p.is_finite()) {
            out.diverged = true;
            break;
        }
        out.states.push(next.clone());
        out.predictions.push(pred.clone());
        state = next;
    }
    Ok(out)
}

/// Closed-loop rollout of a trained model, with divergence judged against
/// the model's normalization statistics.
pub fn rollout(model: &StackedModel, kind: TaskKind, horizon: usize, prefix: &Trajectory) -> Result<Rollout> {
    if prefix.input_dim() != model.meta.input_dim {
        return Err(Error::InconsistentDims(format!(
            "model expects {} inputs, prefix has {}",
            model.meta.input_dim,
            prefix.input_dim()
        )));
    }
    let bound: Vec<f64> = model.norm.x_std.iter().map(|s| DIVERGENCE_STDS * s).collect();
    let center = model.norm.x_mean.clone();
    let mut p = ModelPredictor::new(model);
    rollout_with(&mut p, kind, horizon, prefix, &center, &bound)
}

/// Writes rollout rows `t,s0..,p0..`.
pub fn write_rollout_csv<W: Write>(out: W, r: &Rollout) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let sd = r.states.first().map_or(0, |s| s.len());
    let pd = r.predictions.first().map_or(0, |p| p.len());
    let mut header = vec!["t".to_string()];
    header.extend((0..sd).map(|d| format!("s{d}")));
    header.extend((0..pd).map(|d| format!("p{d}")));
    w.write_record(&header)?;
    for (t, (s, p)) in r.states.iter().zip(&r.predictions).enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(s.iter().chain(p).map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
