//! Command-line surface: `train-baseline`, `quantize-rpr`, `eval`,
//! `oracle-compare` and `inspect-checkpoint`.
//!
//! Exit status: 0 on success, 2 for configuration or dataset errors,
//! 3 for unreadable or corrupt checkpoints, 1 otherwise.

pub mod checkpoint;
pub mod config;
pub mod metrics;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use crate::data::{blob_centers, load_idx, mnist_paths, synth_blobs_at, Augment, Dataset, Normalization, Split};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::optim::OptimState;
use crate::oracle::{brute_force_minlp, ptq_baseline, TinyProblem, TinyRegression};
use crate::quantize::LevelSet;
use crate::rng::Rng;
use crate::rpr::{fraction_in_levels, run_rpr, Objective, RprConfig, RprRun};
use crate::task::{accuracy, train_epoch, ClassificationTask};

use checkpoint::Checkpoint;
use config::{optim_kind, DataSource, InitMode, ProblemKind, RunConfig};
use metrics::{MetricsRow, MetricsWriter};

/// Stream indices for [`Rng::derive`].
pub const MODEL_STREAM: u64 = 0x6d6f_6465;
pub const DATA_STREAM: u64 = 0x6461_7461;

#[derive(Debug, Parser)]
#[command(name = "rpr", version, about = "Quantization-aware training by random partition relaxation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `seed` from the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory (default `runs/<config file stem>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `on` writes wall_time_s as 0 in metrics.csv and real timings to timing.csv.
    #[arg(long, value_enum, default_value = "on")]
    pub deterministic: OnOff,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the full-precision model.
    TrainBaseline(CommonArgs),
    /// Quantize a trained (or freshly initialized) model with RPR.
    QuantizeRpr(CommonArgs),
    /// Top-1 accuracy of a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint to evaluate
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write `split,loss,accuracy` to this CSV file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compare RPR against exhaustive enumeration on a tiny regression problem.
    OracleCompare(CommonArgs),
    /// Print the contents of a checkpoint.
    InspectCheckpoint {
        /// Checkpoint file to print
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// Where and how a command writes its outputs.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out: PathBuf,
    pub deterministic: bool,
}

impl RunOptions {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        RunOptions {
            out: out.into(),
            deterministic: true,
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Dataset(_) | Error::Format { .. } | Error::LevelSetMismatch(_) | Error::EnumerationGuard(_) => 2,
        Error::Checkpoint { .. } => 3,
        _ => 1,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match dispatch(cli.command) {
        Ok(report) => {
            print!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(common: &CommonArgs) -> Result<(RunConfig, RunOptions)> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok((
        cfg,
        RunOptions {
            out: common.out.clone().unwrap_or_default(),
            deterministic: common.deterministic == OnOff::On,
        },
    ))
}

/// Fills in `runs/<config file stem>` when no `--out` was given.
fn with_default_out(mut opts: RunOptions, config: &Path) -> RunOptions {
    if opts.out.as_os_str().is_empty() {
        let stem = config.file_stem().map_or_else(|| "run".into(), |s| s.to_os_string());
        opts.out = Path::new("runs").join(stem);
    }
    opts
}

fn dispatch(command: Command) -> Result<String> {
    match command {
        Command::TrainBaseline(common) => {
            let (cfg, opts) = load_config(&common)?;
            let r = cmd_train_baseline(&cfg, &with_default_out(opts, &common.config))?;
            Ok(format!(
                "train_acc={}\nval_acc={}\ntest_acc={}\ncheckpoint={}\n",
                r.train_accuracy,
                r.val_accuracy,
                r.test_accuracy,
                r.checkpoint.display()
            ))
        }
        Command::QuantizeRpr(common) => {
            let (cfg, opts) = load_config(&common)?;
            let r = cmd_quantize_rpr(&cfg, &with_default_out(opts, &common.config))?;
            Ok(format!(
                "epochs={}\nfull_precision_test_acc={}\nptq_test_acc={}\ntest_acc={}\nfraction_in_levels={}\ncheckpoint={}\n",
                r.epochs,
                r.full_precision_accuracy,
                r.ptq_accuracy,
                r.test_accuracy,
                r.fraction_in_levels,
                r.checkpoint.display()
            ))
        }
        Command::Eval { common, checkpoint, csv } => {
            let (cfg, _) = load_config(&common)?;
            let r = cmd_eval(&cfg, &checkpoint, csv.as_deref())?;
            Ok(format!("loss={}\naccuracy={}\n", r.loss, r.accuracy))
        }
        Command::OracleCompare(common) => {
            let (cfg, opts) = load_config(&common)?;
            let out = (!opts.out.as_os_str().is_empty()).then_some(&opts);
            let r = cmd_oracle_compare(&cfg, out)?;
            Ok(format!(
                "rpr_loss={}\noptimum={}\nrpr_assignment={:?}\noptimal_assignment={:?}\nratio={}\n",
                r.rpr_loss, r.optimum, r.rpr_assignment, r.optimal_assignment, r.ratio
            ))
        }
        Command::InspectCheckpoint { checkpoint } => cmd_inspect_checkpoint(&checkpoint),
    }
}

/// Exclusive ownership of a run directory, released on drop.
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Creates (or reuses) `path`, takes its lock file and writes the config snapshot.
    pub fn open(path: &Path, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        let lock = path.join(".lock");
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|e| Error::Config(format!("run directory {} is in use ({e})", path.display())))?;
        let dir = RunDir { path: path.to_path_buf() };
        let snapshot = path.join("config.toml");
        fs::write(&snapshot, cfg.to_toml()).map_err(|e| Error::io(&snapshot, e))?;
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.path.join(".lock"));
    }
}

/// Training, validation and test data with normalization applied.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn set_normalization(&mut self, norm: &Normalization) {
        for d in [&mut self.train, &mut self.val, &mut self.test] {
            d.normalization = norm.clone();
        }
    }
}

/// Loads the configured data. Normalization is computed from the training
/// split unless `normalization` is given.
pub fn load_splits(cfg: &RunConfig, normalization: Option<&Normalization>) -> Result<Splits> {
    let d = &cfg.data;
    let mut splits = match d.source {
        DataSource::Mnist => {
            let as_dataset_error = |e: Error| match e {
                Error::Io { path, source } => Error::Dataset(format!("cannot read {}: {source}", path.display())),
                other => other,
            };
            let (ti, tl) = mnist_paths(&d.dir, Split::Train);
            let full = load_idx(&ti, &tl, Split::Train).map_err(as_dataset_error)?;
            let (ei, el) = mnist_paths(&d.dir, Split::Test);
            let test = load_idx(&ei, &el, Split::Test).map_err(as_dataset_error)?;
            if d.val_size >= full.len() {
                return Err(Error::Config(format!(
                    "data.val_size {} leaves no training data out of {}",
                    d.val_size,
                    full.len()
                )));
            }
            let cut = full.len() - d.val_size;
            Splits {
                train: full.slice(0, cut),
                val: full.slice(cut, full.len()),
                test,
            }
        }
        DataSource::SynthBlobs => {
            let centers = blob_centers(d.classes, d.dim, &mut Rng::new(cfg.seed));
            let draw = |n, i| synth_blobs_at(&centers, n, &mut Rng::derive(cfg.seed, DATA_STREAM, i));
            let mut test = draw(d.test_per_class, 2)?;
            test.split = Split::Test;
            Splits {
                train: draw(d.per_class, 0)?,
                val: draw(d.test_per_class, 1)?,
                test,
            }
        }
    };
    let norm = match normalization {
        Some(n) => n.clone(),
        None if d.source == DataSource::Mnist => splits.train.compute_normalization(),
        None => Normalization::identity(splits.train.channels()),
    };
    if norm.mean.len() != splits.train.channels() {
        return Err(Error::Config(format!(
            "normalization has {} channels, data has {}",
            norm.mean.len(),
            splits.train.channels()
        )));
    }
    splits.set_normalization(&norm);
    Ok(splits)
}

fn build_task(cfg: &RunConfig, model: Model, splits: &Splits) -> Result<ClassificationTask> {
    let d = &cfg.data;
    let augment = Augment {
        pad: d.pad,
        crop: None,
        flip_prob: d.flip_prob,
    };
    let mut task = ClassificationTask::new(model, splits.train.clone(), splits.val.clone(), d.batch_size, augment, cfg.seed)?;
    if d.epoch_samples > 0 {
        task.epoch_samples = Some(d.epoch_samples);
    }
    Ok(task)
}

pub fn init_model(cfg: &RunConfig) -> Result<Model> {
    Model::new(&cfg.model.specs()?, &mut Rng::derive(cfg.seed, MODEL_STREAM, 0))
}

#[derive(Debug, Clone)]
pub struct BaselineReport {
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub checkpoint: PathBuf,
}

/// Trains the full-precision model and writes `model.ckpt` and `metrics.csv`.
pub fn cmd_train_baseline(cfg: &RunConfig, opts: &RunOptions) -> Result<BaselineReport> {
    let splits = load_splits(cfg, None)?;
    let model = init_model(cfg)?;
    let dir = RunDir::open(&opts.out, cfg)?;
    let mut task = build_task(cfg, model, &splits)?;
    let b = &cfg.baseline;
    let mut opt = OptimState::new(optim_kind(b.optimizer, b.momentum), b.lr)?;
    let mut writer = MetricsWriter::create(dir.path(), opts.deterministic)?;
    let mut val_accuracy = 0.0;
    for epoch in 0..b.epochs as u64 {
        let start = Instant::now();
        let train = train_epoch(&mut task, epoch, &mut opt)?;
        let val = task.evaluate(&task.model.shadow_weights())?;
        val_accuracy = val.accuracy;
        info!(
            "baseline epoch {} train_loss={:.5} train_acc={:.4} val_loss={:.5} val_acc={:.4}",
            epoch + 1,
            train.loss,
            train.accuracy,
            val.loss,
            val.accuracy
        );
        writer.write(&MetricsRow {
            epoch: epoch + 1,
            phase: "baseline".into(),
            ff: 0.0,
            lr: opt.lr(),
            train_loss: train.loss,
            train_acc: train.accuracy,
            val_loss: val.loss,
            val_acc: val.accuracy,
            wall_time_s: start.elapsed().as_secs_f64(),
        })?;
    }
    let train_accuracy = accuracy(&task.model, &splits.train)?;
    let test_accuracy = task.evaluate_on(&splits.test, &task.model.shadow_weights())?.accuracy;
    let mut ckpt = Checkpoint::from_model(&task.model, splits.train.normalization.clone());
    ckpt.metadata.insert("command".into(), "train-baseline".into());
    ckpt.metadata.insert("seed".into(), cfg.seed.to_string());
    ckpt.metadata.insert("test_accuracy".into(), test_accuracy.to_string());
    ckpt.optim = Some(opt);
    let path = dir.path().join("model.ckpt");
    ckpt.save(&path)?;
    Ok(BaselineReport {
        train_accuracy,
        val_accuracy,
        test_accuracy,
        checkpoint: path,
    })
}

#[derive(Debug, Clone)]
pub struct RprReport {
    pub epochs: usize,
    pub full_precision_accuracy: f64,
    pub ptq_accuracy: f64,
    pub test_accuracy: f64,
    pub fraction_in_levels: f64,
    pub checkpoint: PathBuf,
}

/// Runs RPR; writes `metrics.csv`, `state.ckpt` after every epoch and the
/// final `model.ckpt`.
pub fn cmd_quantize_rpr(cfg: &RunConfig, opts: &RunOptions) -> Result<RprReport> {
    let levels = cfg.rpr.levels.build()?;
    let specs = cfg.model.specs()?;
    let (model, normalization) = match cfg.rpr.init {
        InitMode::Checkpoint => {
            let path = cfg
                .rpr
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::Config("rpr.checkpoint is required when rpr.init = \"checkpoint\"".into()))?;
            let ckpt = Checkpoint::load(path)?;
            if ckpt.layers != specs {
                return Err(Error::Config(format!(
                    "checkpoint architecture {:?} differs from model.layers",
                    ckpt.layers.iter().map(ToString::to_string).collect::<Vec<_>>()
                )));
            }
            if let Some(stored) = &ckpt.levels {
                if stored != &levels {
                    return Err(Error::LevelSetMismatch(format!(
                        "checkpoint was quantized to {stored}, config requests {levels}"
                    )));
                }
            }
            (ckpt.model()?, Some(ckpt.normalization))
        }
        InitMode::Random => (init_model(cfg)?, None),
    };
    let splits = load_splits(cfg, normalization.as_ref())?;
    let dir = RunDir::open(&opts.out, cfg)?;
    let mut task = build_task(cfg, model, &splits)?;

    let fp_eff = task.model.shadow_weights();
    let full_precision_accuracy = task.evaluate_on(&splits.test, &fp_eff)?.accuracy;
    let ptq_accuracy = ptq_baseline(&task.model, &levels, &splits.test)?;
    info!("full-precision test accuracy {full_precision_accuracy:.4}, projection-only {ptq_accuracy:.4}");

    let rpr_cfg = RprConfig {
        levels: levels.clone(),
        plan: cfg.rpr.plan()?,
        optimizer: optim_kind(cfg.rpr.optimizer, cfg.rpr.momentum),
        seed: cfg.seed,
        rescale: cfg.rpr.rescale,
    };
    if rpr_cfg.rescale {
        task.rescale(&levels);
    }
    let mut run = RprRun::new(&rpr_cfg)?;
    let mut writer = MetricsWriter::create(dir.path(), opts.deterministic)?;
    let state_path = dir.path().join("state.ckpt");
    let normalization = splits.train.normalization.clone();
    let snapshot = |run: &RprRun, model: &Model, command: &str| {
        let mut ckpt = Checkpoint::from_model(model, normalization.clone());
        ckpt.metadata.insert("command".into(), command.into());
        ckpt.metadata.insert("seed".into(), cfg.seed.to_string());
        ckpt.levels = Some(run.levels.clone());
        ckpt.schedule = Some(run.schedule.clone());
        ckpt.optim = Some(run.optim.clone());
        ckpt.rng = Some(run.rng.clone());
        ckpt
    };
    while let Some(record) = run.run_epoch(&mut task)? {
        writer.write(&MetricsRow::from_record(&record))?;
        snapshot(&run, &task.model, "quantize-rpr").save(&state_path)?;
    }
    run.finish(&mut task);

    let eff = task.model.shadow_weights();
    let test_accuracy = task.evaluate_on(&splits.test, &eff)?.accuracy;
    let fraction = fraction_in_levels(task.model.params(), &levels);
    let mut ckpt = snapshot(&run, &task.model, "quantize-rpr");
    ckpt.metadata.insert("test_accuracy".into(), test_accuracy.to_string());
    ckpt.metadata.insert("ptq_test_accuracy".into(), ptq_accuracy.to_string());
    ckpt.metadata.insert("full_precision_test_accuracy".into(), full_precision_accuracy.to_string());
    let path = dir.path().join("model.ckpt");
    ckpt.save(&path)?;
    Ok(RprReport {
        epochs: run.history.len(),
        full_precision_accuracy,
        ptq_accuracy,
        test_accuracy,
        fraction_in_levels: fraction,
        checkpoint: path,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub loss: f64,
    pub accuracy: f64,
}

/// Eval-mode metrics of a checkpoint on the configured test split.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, csv_path: Option<&Path>) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.model()?;
    let splits = load_splits(cfg, Some(&ckpt.normalization))?;
    let task = build_task(cfg, model, &splits)?;
    let m = task.evaluate_on(&splits.test, &task.model.shadow_weights())?;
    if let Some(path) = csv_path {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["split", "loss", "accuracy"])?;
        w.write_record(["test".to_string(), m.loss.to_string(), m.accuracy.to_string()])?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(EvalReport {
        loss: m.loss,
        accuracy: m.accuracy,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub rpr_loss: f64,
    pub optimum: f64,
    pub ratio: f64,
    pub rpr_assignment: Vec<f64>,
    pub optimal_assignment: Vec<f64>,
}

/// The configured tiny problem for `seed`.
pub fn oracle_problem(cfg: &RunConfig, levels: &LevelSet) -> TinyProblem {
    let o = &cfg.oracle;
    match o.problem {
        ProblemKind::Random => TinyProblem::random(o.rows, o.dim, o.noise, levels.clone(), cfg.seed),
        ProblemKind::Realizable => TinyProblem::realizable(o.rows, o.dim, o.scale, levels.clone(), cfg.seed).0,
    }
}

/// Losses below this fraction of `1 + ‖y‖²` count as exact zeros in the ratio.
pub const RATIO_FLOOR: f64 = 1e-12;

/// `rpr / optimum`, with both clamped to `floor` so that two numerically zero
/// losses compare as equal.
pub fn loss_ratio(rpr: f64, optimum: f64, floor: f64) -> f64 {
    rpr.max(floor) / optimum.max(floor)
}

/// Exhaustive optimum vs. pretrain + RPR on the configured tiny problem.
pub fn cmd_oracle_compare(cfg: &RunConfig, opts: Option<&RunOptions>) -> Result<OracleReport> {
    let levels = cfg.rpr.levels.build()?;
    let problem = oracle_problem(cfg, &levels);
    let best = brute_force_minlp(&problem)?;
    let floor = RATIO_FLOOR * (1.0 + problem.y.iter().map(|v| v * v).sum::<f64>());
    let dir = opts.map(|o| RunDir::open(&o.out, cfg)).transpose()?;

    let mut reg = TinyRegression::new(problem, cfg.oracle.batch_size, cfg.seed)?;
    let mut opt = OptimState::new(optim_kind(cfg.rpr.optimizer, cfg.rpr.momentum), cfg.oracle.pretrain_lr)?;
    for epoch in 0..cfg.oracle.pretrain_epochs as u64 {
        train_epoch(&mut reg, epoch, &mut opt)?;
    }
    let rpr_cfg = RprConfig {
        levels,
        plan: cfg.rpr.plan()?,
        optimizer: optim_kind(cfg.rpr.optimizer, cfg.rpr.momentum),
        seed: cfg.seed,
        rescale: cfg.rpr.rescale,
    };
    let history = run_rpr(&mut reg, &rpr_cfg)?;
    if let (Some(dir), Some(opts)) = (&dir, opts) {
        let mut writer = MetricsWriter::create(dir.path(), opts.deterministic)?;
        for r in &history {
            writer.write(&MetricsRow::from_record(r))?;
        }
    }
    let rpr_loss = reg.loss();
    let ratio = loss_ratio(rpr_loss, best.loss, floor);
    Ok(OracleReport {
        rpr_loss,
        optimum: best.loss,
        ratio,
        rpr_assignment: reg.weights().to_vec(),
        optimal_assignment: best.assignment,
    })
}

/// Human-readable summary of a checkpoint.
pub fn cmd_inspect_checkpoint(path: &Path) -> Result<String> {
    let c = Checkpoint::load(path)?;
    let mut s = String::new();
    let _ = writeln!(s, "format: RPRCKPT1 v{}", checkpoint::VERSION);
    for (k, v) in &c.metadata {
        let _ = writeln!(s, "meta {k} = {v}");
    }
    let layers: Vec<String> = c.layers.iter().map(ToString::to_string).collect();
    let _ = writeln!(s, "layers: {}", layers.join(" "));
    match &c.levels {
        Some(l) => {
            let _ = writeln!(s, "levels: {l}");
        }
        None => {
            let _ = writeln!(s, "levels: none");
        }
    }
    for p in &c.params {
        let _ = write!(
            s,
            "param {} {:?} {:?} scales={}",
            p.name,
            p.kind,
            p.values.shape(),
            p.scales.len()
        );
        if let (Some(l), true) = (&c.levels, p.is_quantizable()) {
            let inside = p.values.data().iter().filter(|&&v| l.contains(v)).count();
            let _ = write!(s, " in_levels={inside}/{}", p.values.len());
        }
        let _ = writeln!(s);
    }
    for (name, bn) in &c.batch_norm {
        let _ = writeln!(s, "batchnorm {name} channels={} eps={} momentum={}", bn.running_mean.len(), bn.eps, bn.momentum);
    }
    let _ = writeln!(s, "normalization mean={:?} std={:?}", c.normalization.mean, c.normalization.std);
    if let Some(sch) = &c.schedule {
        let _ = writeln!(s, "schedule phase={} ff={} lr={} epoch={}", sch.phase, sch.ff, sch.lr, sch.epoch);
    }
    if let Some(o) = &c.optim {
        let _ = writeln!(s, "optimizer {:?} lr={} steps={}", o.kind(), o.lr(), o.step_count());
    }
    if let Some(r) = &c.rng {
        let _ = writeln!(s, "rng seed={} state={:#018x}", r.seed(), r.state());
    }
    Ok(s)
}
