//! Trajectory datasets: JSON-lines storage, normalization, start-offset
//! augmentation and time-major batch assembly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compute::Tensor;
use crate::error::{Error, Result};
use crate::vand::RandomStream;

/// Augmented views start at a uniformly drawn offset in `1..=MAX_OFFSET`.
pub const MAX_OFFSET: usize = 10;

/// Lower bound applied to every normalization standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

/// One demonstration: observations `x` (`T×|X|`) and targets `y` (`T×|Y|`).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub x: Tensor,
    pub y: Tensor,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRecord {
    id: String,
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (r, _) = t.dims2().expect("matrix");
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

fn from_rows(rows: Vec<Vec<f64>>, what: &str) -> std::result::Result<Tensor, String> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 {
        return Err(format!("`{what}` must be a non-empty T×D array"));
    }
    if rows.iter().any(|row| row.len() != c) {
        return Err(format!("`{what}` has ragged rows"));
    }
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(format!("`{what}` contains non-finite values"));
    }
    Tensor::matrix(r, c, data).map_err(|e| e.to_string())
}

impl Trajectory {
    pub fn new(id: impl Into<String>, x: Tensor, y: Tensor) -> Result<Self> {
        let traj = Self { id: id.into(), x, y };
        traj.validate()?;
        Ok(traj)
    }

    pub fn validate(&self) -> Result<()> {
        let (tx, _) = self.x.dims2()?;
        let (ty, _) = self.y.dims2()?;
        if self.x.shape().len() != 2 || self.y.shape().len() != 2 {
            return Err(Error::InconsistentDims(format!(
                "trajectory `{}` must hold T×D matrices",
                self.id
            )));
        }
        if tx != ty {
            return Err(Error::InconsistentDims(format!(
                "trajectory `{}` has {tx} observations but {ty} targets",
                self.id
            )));
        }
        if tx < 2 {
            return Err(Error::TrajectoryTooShort { len: tx, min: 2 });
        }
        if !self.x.is_finite() || !self.y.is_finite() {
            return Err(Error::NonFinite(format!("trajectory `{}`", self.id)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn input_dim(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.y.shape()[1]
    }

    /// Steps `start..start + len` (0-based) as a new trajectory.
    pub fn slice(&self, start: usize, len: usize) -> Result<Trajectory> {
        if start + len > self.len() || len < 2 {
            return Err(Error::TrajectoryTooShort {
                len: self.len(),
                min: start + len.max(2),
            });
        }
        let cut = |t: &Tensor| {
            let d = t.shape()[1];
            Tensor::matrix(len, d, t.data()[start * d..(start + len) * d].to_vec()).unwrap()
        };
        Ok(Trajectory {
            id: self.id.clone(),
            x: cut(&self.x),
            y: cut(&self.y),
        })
    }
}

pub fn save_dataset(path: impl AsRef<Path>, dataset: &[Trajectory]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_dataset(&mut out, dataset)?;
    out.flush()?;
    Ok(())
}

pub fn write_dataset<W: Write>(out: &mut W, dataset: &[Trajectory]) -> Result<()> {
    for traj in dataset {
        let rec = TrajectoryRecord {
            id: traj.id.clone(),
            x: to_rows(&traj.x),
            y: to_rows(&traj.y),
        };
        serde_json::to_writer(&mut *out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads one JSON trajectory per line. Blank lines are skipped.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Trajectory>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut out: Vec<Trajectory> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        let x = from_rows(rec.x, "x").map_err(|m| parse_err(lineno, m))?;
        let y = from_rows(rec.y, "y").map_err(|m| parse_err(lineno, m))?;
        let traj = Trajectory { id: rec.id, x, y };
        traj.validate().map_err(|e| parse_err(lineno, e.to_string()))?;
        if let Some(first) = out.first() {
            if first.input_dim() != traj.input_dim() || first.output_dim() != traj.output_dim() {
                return Err(Error::InconsistentDims(format!(
                    "line {lineno}: dims ({}, {}) differ from first trajectory ({}, {})",
                    traj.input_dim(),
                    traj.output_dim(),
                    first.input_dim(),
                    first.output_dim()
                )));
            }
        }
        out.push(traj);
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}

/// Per-dimension mean and standard deviation of inputs and targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
}

fn column_stats<'a>(mats: impl Iterator<Item = &'a Tensor> + Clone, dim: usize) -> (Vec<f64>, Vec<f64>) {
    // Shifting by the first row keeps constant columns exact.
    let shift: Vec<f64> = mats
        .clone()
        .next()
        .map(|m| m.data()[..dim].to_vec())
        .unwrap_or_else(|| vec![0.0; dim]);
    let mut mean = vec![0.0; dim];
    let mut count = 0usize;
    for m in mats.clone() {
        for row in m.data().chunks(dim) {
            for k in 0..dim {
                mean[k] += row[k] - shift[k];
            }
            count += 1;
        }
    }
    for k in 0..dim {
        mean[k] = shift[k] + mean[k] / count as f64;
    }
    let mut var = vec![0.0; dim];
    for m in mats {
        for row in m.data().chunks(dim) {
            for k in 0..dim {
                let d = row[k] - mean[k];
                var[k] += d * d;
            }
        }
    }
    let std = var
        .iter()
        .map(|v| (v / count as f64).sqrt().max(STD_FLOOR))
        .collect();
    (mean, std)
}

impl NormStats {
    /// Identity normalization.
    pub fn identity(input_dim: usize, output_dim: usize) -> Self {
        Self {
            x_mean: vec![0.0; input_dim],
            x_std: vec![1.0; input_dim],
            y_mean: vec![0.0; output_dim],
            y_std: vec![1.0; output_dim],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.x_mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.y_mean.len()
    }

    pub fn normalize_x(&self, x: &[f64]) -> Vec<f64> {
        normalize(x, &self.x_mean, &self.x_std)
    }

    pub fn normalize_y(&self, y: &[f64]) -> Vec<f64> {
        normalize(y, &self.y_mean, &self.y_std)
    }

    pub fn denormalize_x(&self, x: &[f64]) -> Vec<f64> {
        denormalize(x, &self.x_mean, &self.x_std)
    }

    pub fn denormalize_y(&self, y: &[f64]) -> Vec<f64> {
        denormalize(y, &self.y_mean, &self.y_std)
    }
}

fn normalize(v: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    let d = mean.len();
    v.iter()
        .enumerate()
        .map(|(k, &x)| (x - mean[k % d]) / std[k % d])
        .collect()
}

fn denormalize(v: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    let d = mean.len();
    v.iter()
        .enumerate()
        .map(|(k, &x)| x * std[k % d] + mean[k % d])
        .collect()
}

/// Mean and (floored) standard deviation over every `(n, t)`.
pub fn fit_norm(dataset: &[Trajectory]) -> Result<NormStats> {
    let first = dataset.first().ok_or(Error::EmptyDataset)?;
    let (x_mean, x_std) = column_stats(dataset.iter().map(|t| &t.x), first.input_dim());
    let (y_mean, y_std) = column_stats(dataset.iter().map(|t| &t.y), first.output_dim());
    Ok(NormStats {
        x_mean,
        x_std,
        y_mean,
        y_std,
    })
}

pub fn apply_norm(traj: &Trajectory, norm: &NormStats) -> Trajectory {
    Trajectory {
        id: traj.id.clone(),
        x: Tensor::new(traj.x.shape().to_vec(), norm.normalize_x(traj.x.data())).unwrap(),
        y: Tensor::new(traj.y.shape().to_vec(), norm.normalize_y(traj.y.data())).unwrap(),
    }
}

pub fn invert_norm(traj: &Trajectory, norm: &NormStats) -> Trajectory {
    Trajectory {
        id: traj.id.clone(),
        x: Tensor::new(traj.x.shape().to_vec(), norm.denormalize_x(traj.x.data())).unwrap(),
        y: Tensor::new(traj.y.shape().to_vec(), norm.denormalize_y(traj.y.data())).unwrap(),
    }
}

/// A window into a trajectory. `start` is 0-based.
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryView<'a> {
    pub traj: &'a Trajectory,
    pub start: usize,
    pub len: usize,
}

impl TrajectoryView<'_> {
    pub fn x_row(&self, t: usize) -> &[f64] {
        assert!(t < self.len);
        self.traj.x.row(self.start + t)
    }

    pub fn y_row(&self, t: usize) -> &[f64] {
        assert!(t < self.len);
        self.traj.y.row(self.start + t)
    }

    /// 1-based start index, as drawn.
    pub fn offset(&self) -> usize {
        self.start + 1
    }
}

/// View starting at 1-based step `s ∈ 1..=MAX_OFFSET` with length `aligned_len`.
pub fn augment_offset_at(traj: &Trajectory, s: usize, aligned_len: usize) -> Result<TrajectoryView<'_>> {
    let min = MAX_OFFSET + 2;
    if traj.len() < min {
        return Err(Error::TrajectoryTooShort {
            len: traj.len(),
            min,
        });
    }
    if !(1..=MAX_OFFSET).contains(&s) || s - 1 + aligned_len > traj.len() {
        return Err(Error::InvalidConfig(format!(
            "offset {s} with length {aligned_len} exceeds trajectory of length {}",
            traj.len()
        )));
    }
    Ok(TrajectoryView {
        traj,
        start: s - 1,
        len: aligned_len,
    })
}

/// Random start in `1..=MAX_OFFSET`; the view keeps `T − MAX_OFFSET` steps.
pub fn augment_offset<'a>(traj: &'a Trajectory, rng: &mut RandomStream) -> Result<TrajectoryView<'a>> {
    let s = rng.rng().random_range(1..=MAX_OFFSET);
    augment_offset_at(traj, s, traj.len().saturating_sub(MAX_OFFSET))
}

/// Common length of augmented views over a dataset.
pub fn aligned_len(dataset: &[Trajectory]) -> Result<usize> {
    let min_t = dataset
        .iter()
        .map(Trajectory::len)
        .min()
        .ok_or(Error::EmptyDataset)?;
    if min_t < MAX_OFFSET + 2 {
        return Err(Error::TrajectoryTooShort {
            len: min_t,
            min: MAX_OFFSET + 2,
        });
    }
    Ok(min_t - MAX_OFFSET)
}

/// Time-major batch: `x` is `T'×B×|X|`, `y` is `T'×B×|Y|`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Tensor,
    /// Source trajectory index and 1-based offset of each batch column.
    pub sources: Vec<(usize, usize)>,
}

impl Batch {
    pub fn steps(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn batch_size(&self) -> usize {
        self.x.shape()[1]
    }

    /// `[B×|X|]` observations at step `t`.
    pub fn x_step(&self, t: usize) -> Tensor {
        step_slice(&self.x, t)
    }

    /// `[B×|Y|]` targets at step `t`.
    pub fn y_step(&self, t: usize) -> Tensor {
        step_slice(&self.y, t)
    }
}

fn step_slice(t3: &Tensor, t: usize) -> Tensor {
    let (b, d) = (t3.shape()[1], t3.shape()[2]);
    Tensor::matrix(b, d, t3.data()[t * b * d..(t + 1) * b * d].to_vec()).unwrap()
}

/// Stacks equal-length views into a time-major batch.
pub fn stack_views(views: &[TrajectoryView<'_>], sources: Vec<(usize, usize)>) -> Result<Batch> {
    let first = views.first().ok_or(Error::EmptyDataset)?;
    let (len, b) = (first.len, views.len());
    let (dx, dy) = (first.traj.input_dim(), first.traj.output_dim());
    if views.iter().any(|v| v.len != len) {
        return Err(Error::InconsistentDims("views differ in length".into()));
    }
    let mut x = Vec::with_capacity(len * b * dx);
    let mut y = Vec::with_capacity(len * b * dy);
    for t in 0..len {
        for v in views {
            x.extend_from_slice(v.x_row(t));
            y.extend_from_slice(v.y_row(t));
        }
    }
    Ok(Batch {
        x: Tensor::new(vec![len, b, dx], x)?,
        y: Tensor::new(vec![len, b, dy], y)?,
        sources,
    })
}

/// One batch of `batch_size` augmented trajectories; sampling is with
/// replacement only when `batch_size` exceeds the dataset size.
pub fn make_batch(dataset: &[Trajectory], batch_size: usize, rng: &mut RandomStream) -> Result<Batch> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    let n = dataset.len();
    let len = aligned_len(dataset)?;
    let picks: Vec<usize> = if batch_size <= n {
        index::sample(rng.rng(), n, batch_size).into_vec()
    } else {
        (0..batch_size).map(|_| rng.rng().random_range(0..n)).collect()
    };
    let mut views = Vec::with_capacity(batch_size);
    let mut sources = Vec::with_capacity(batch_size);
    for &i in &picks {
        let s = rng.rng().random_range(1..=MAX_OFFSET);
        let v = augment_offset_at(&dataset[i], s, len)?;
        sources.push((i, s));
        views.push(v);
    }
    stack_views(&views, sources)
}

/// `count` independent batches.
pub fn make_batches(
    dataset: &[Trajectory],
    batch_size: usize,
    count: usize,
    rng: &mut RandomStream,
) -> Result<Vec<Batch>> {
    (0..count)
        .map(|_| make_batch(dataset, batch_size, rng))
        .collect()
}

/// Stacks whole trajectories of equal length, no augmentation.
pub fn full_batch(dataset: &[Trajectory]) -> Result<Batch> {
    let views: Vec<_> = dataset
        .iter()
        .map(|t| TrajectoryView {
            traj: t,
            start: 0,
            len: t.len(),
        })
        .collect();
    let sources = (0..dataset.len()).map(|i| (i, 1)).collect();
    stack_views(&views, sources)
}
