use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use vand::data::{load_dataset, save_dataset};
use vand::rnn::StackedModel;
use vand::tasks::{self, TaskKind, TaskSpec};
use vand::trainer::{self, TrainConfig};
use vand::vand::ModeKind;

const EXIT_INPUT: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "vand", version, about = "Train and evaluate LSTMs with learnable noise and dropout")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trajectory dataset
    GenData(GenDataArgs),
    /// Train one model
    Train(TrainArgs),
    /// Teacher-forced test MSE of a trained model
    Eval(EvalArgs),
    /// Train every mode x seed combination and tabulate the results
    Sweep(SweepArgs),
    /// Closed-loop rollout of a trained model
    Rollout(RolloutArgs),
    /// Export per-unit noise scales and dropout ratios
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    task: TaskKind,
    /// Number of trajectories
    #[arg(long, default_value_t = 10)]
    n: usize,
    /// Steps per trajectory
    #[arg(long, default_value_t = 600)]
    steps: usize,
    #[arg(long, env = "VAND_SEED", default_value_t = 0)]
    seed: u64,
    /// Waypoint program of the sequential task
    #[arg(long, default_value_t = 0)]
    program_seed: u64,
    /// Observation noise std (task default when omitted)
    #[arg(long)]
    obs_noise: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

/// Training flags; each one overrides the matching config key.
#[derive(Args, Clone, Default)]
struct Overrides {
    /// JSON training config
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<ModeKind>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    const_value: Option<f64>,
    /// Task name recorded in outputs
    #[arg(long)]
    task: Option<String>,
    /// Training trajectories
    #[arg(long)]
    data: Option<PathBuf>,
    /// Test trajectories
    #[arg(long)]
    test: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Overrides,
    #[arg(long, env = "VAND_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    out_model: PathBuf,
    /// JSON file with the run summary and curves
    #[arg(long)]
    out_metrics: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Also write the scores as CSV
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Overrides,
    /// Comma-separated mode names
    #[arg(long, value_delimiter = ',', default_value = "vanilla,const_noise,var_noise,const_dropout,var_dropout,vand")]
    modes: Vec<ModeKind>,
    /// Seeds such as `0..19` (inclusive) or `1,4,9`
    #[arg(long, env = "VAND_SEED")]
    seeds: String,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Results CSV
    #[arg(long)]
    out: PathBuf,
    /// Directory for one model file per run
    #[arg(long)]
    model_dir: Option<PathBuf>,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long)]
    model: PathBuf,
    /// Trajectories providing the start prefix
    #[arg(long)]
    data: PathBuf,
    /// Task dynamics (defaults to the task stored in the model)
    #[arg(long)]
    task: Option<TaskKind>,
    #[arg(long, default_value_t = 0)]
    traj: usize,
    /// Steps fed from the data before closing the loop
    #[arg(long, default_value_t = 50)]
    prefix: usize,
    #[arg(long, default_value_t = 1200)]
    horizon: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Error that maps to a specific exit status.
#[derive(Debug)]
struct Exit(u8);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "exit {}", self.0)
    }
}

impl std::error::Error for Exit {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Rollout(a) => rollout(a),
        Command::Analyze(a) => analyze(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => match e.downcast_ref::<Exit>() {
            Some(Exit(code)) => ExitCode::from(*code),
            None => {
                eprintln!("error: {e:#}");
                ExitCode::from(EXIT_INPUT)
            }
        },
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn load(path: &Path) -> anyhow::Result<Vec<vand::data::Trajectory>> {
    load_dataset(path).with_context(|| format!("cannot load {}", path.display()))
}

fn load_model(path: &Path) -> anyhow::Result<StackedModel> {
    StackedModel::load(path).with_context(|| format!("cannot load model {}", path.display()))
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let mut spec = TaskSpec::new(a.task, a.steps, a.seed);
    spec.program_seed = a.program_seed;
    if let Some(s) = a.obs_noise {
        spec.obs_noise = s;
    }
    let data = tasks::generate(&spec, a.n)?;
    save_dataset(&a.out, &data).with_context(|| format!("cannot write {}", a.out.display()))?;
    println!(
        "wrote {} {} trajectories, T={}, |X|={}, |Y|={} to {}",
        data.len(),
        a.task,
        a.steps,
        spec.input_dim(),
        spec.output_dim(),
        a.out.display()
    );
    Ok(())
}

fn resolve_config(o: &Overrides) -> anyhow::Result<TrainConfig> {
    let mut c = match &o.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("bad config {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = o.$field.clone() {
                c.$field = v;
            }
        )*};
    }
    set!(mode, layers, hidden, lr, batch_size, epochs, steps_per_epoch, eval_every, const_value);
    if o.task.is_some() {
        c.task = o.task.clone();
    }
    if o.data.is_some() {
        c.train_data = o.data.clone();
    }
    if o.test.is_some() {
        c.test_data = o.test.clone();
    }
    c.validate()?;
    Ok(c)
}

/// Task named by the trajectory ids written by `gen-data`, when they agree.
fn task_from_ids(data: &[vand::data::Trajectory]) -> Option<TaskKind> {
    let kind_of = |id: &str| match id.split('-').next() {
        Some("seq") => Some(TaskKind::Sequential),
        Some("per") => Some(TaskKind::Periodic),
        _ => None,
    };
    let first = kind_of(&data.first()?.id)?;
    data.iter().all(|t| kind_of(&t.id) == Some(first)).then_some(first)
}

fn datasets(c: &mut TrainConfig) -> anyhow::Result<(Vec<vand::data::Trajectory>, Vec<vand::data::Trajectory>)> {
    let Some(train_path) = &c.train_data else {
        bail!("no training data: pass --data or set `train_data` in the config");
    };
    let Some(test_path) = &c.test_data else {
        bail!("no test data: pass --test or set `test_data` in the config");
    };
    let (train_set, test_set) = (load(train_path)?, load(test_path)?);
    if c.task.is_none() {
        c.task = task_from_ids(&train_set).map(|k| k.to_string());
    }
    Ok((train_set, test_set))
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut c = resolve_config(&a.common)?;
    if let Some(seed) = a.seed {
        c.seed = seed;
    }
    let (train_set, test_set) = datasets(&mut c)?;
    let (model, result) = trainer::train(&c, &train_set, &test_set)?;
    model.save(&a.out_model).with_context(|| format!("cannot write {}", a.out_model.display()))?;
    if let Some(p) = &a.out_metrics {
        let mut w = create(p)?;
        serde_json::to_writer_pretty(&mut w, &result)?;
        writeln!(w)?;
        w.flush()?;
    }
    if result.diverged {
        eprintln!(
            "diverged after {} steps: {}",
            result.optimizer_steps,
            result.failure.as_deref().unwrap_or("non-finite values")
        );
        return Err(Exit(EXIT_DIVERGED).into());
    }
    println!(
        "mode={} seed={} steps={} mse_norm={} mse_raw={} wall_s={:.1}",
        result.mode,
        result.seed,
        result.optimizer_steps,
        result.mse_norm.map(|v| v.to_string()).unwrap_or_default(),
        result.mse_raw.map(|v| v.to_string()).unwrap_or_default(),
        result.wall_s
    );
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let model = load_model(&a.model)?;
    let data = load(&a.data)?;
    let (mse_norm, mse_raw) = trainer::evaluate(&model, &data)?;
    let text = format!("mse_norm,mse_raw\n{mse_norm},{mse_raw}\n");
    print!("{text}");
    if let Some(p) = &a.out {
        fs::write(p, text).with_context(|| format!("cannot write {}", p.display()))?;
    }
    Ok(())
}

/// Parses `a..b` (inclusive) ranges and single seeds, comma-separated.
fn parse_seeds(s: &str) -> anyhow::Result<Vec<u64>> {
    let mut seeds = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((lo, hi)) = part.split_once("..") {
            let lo: u64 = lo.trim().parse().with_context(|| format!("bad seed range `{part}`"))?;
            let hi: u64 = hi.trim().parse().with_context(|| format!("bad seed range `{part}`"))?;
            if hi < lo {
                bail!("empty seed range `{part}`");
            }
            seeds.extend(lo..=hi);
        } else {
            seeds.push(part.parse().with_context(|| format!("bad seed `{part}`"))?);
        }
    }
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    Ok(seeds)
}

fn sweep(a: SweepArgs) -> anyhow::Result<()> {
    let seeds = parse_seeds(&a.seeds)?;
    if a.modes.is_empty() {
        bail!("no modes given");
    }
    let mut c = resolve_config(&a.common)?;
    let (train_set, test_set) = datasets(&mut c)?;
    if let Some(dir) = &a.model_dir {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let rows = trainer::run_matrix(&c, &train_set, &test_set, &a.modes, &seeds, a.workers, a.model_dir.as_deref())?;
    trainer::write_results_csv(create(&a.out)?, &rows)?;

    let mut out = io::stdout().lock();
    writeln!(out, "{:<14} {:>14} {:>6} {:>9}", "mode", "median_mse", "runs", "diverged")?;
    for (mode, median, n, diverged) in trainer::median_table(&rows) {
        writeln!(out, "{:<14} {:>14.6e} {:>6} {:>9}", mode.name(), median, n, diverged)?;
    }
    for r in rows.iter().filter(|r| r.failure.is_some() && !r.diverged) {
        eprintln!("run {} seed {} failed: {}", r.mode, r.seed, r.failure.as_deref().unwrap_or(""));
    }
    Ok(())
}

fn rollout(a: RolloutArgs) -> anyhow::Result<()> {
    let model = load_model(&a.model)?;
    let data = load(&a.data)?;
    let kind = match (a.task, model.meta.task.as_deref()) {
        (Some(k), _) => k,
        (None, Some(name)) => name.parse()?,
        (None, None) => match task_from_ids(&data) {
            Some(k) => k,
            None => bail!("model does not record its task; pass --task"),
        },
    };
    let Some(traj) = data.get(a.traj) else {
        bail!("trajectory index {} out of range ({} available)", a.traj, data.len());
    };
    if a.prefix == 0 || a.prefix > traj.len() {
        bail!("prefix must be between 1 and {}", traj.len());
    }
    let prefix = traj.slice(0, a.prefix)?;
    let r = tasks::rollout(&model, kind, a.horizon, &prefix)?;
    tasks::write_rollout_csv(create(&a.out)?, &r)?;
    println!("steps={} diverged={}", r.len(), r.diverged);
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> anyhow::Result<()> {
    let model = load_model(&a.model)?;
    let rows = trainer::analyze_params(&model)?;
    trainer::write_analysis_csv(create(&a.out)?, &rows)?;
    for r in &rows {
        if let trainer::AnalysisRow::Summary {
            layer,
            sigma_median,
            beta_median,
            sigma_iqr,
            beta_iqr,
        } = r
        {
            println!(
                "layer {layer}: sigma median {sigma_median:.4} (IQR {sigma_iqr:.4}), beta median {beta_median:.4} (IQR {beta_iqr:.4})"
            );
        }
    }
    Ok(())
}
