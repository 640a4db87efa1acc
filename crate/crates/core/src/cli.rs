//! Command-line front end.
//!
//! Exit codes: 0 success, 1 invalid arguments or configuration, 2 I/O or
//! file-format failure, 3 numerical failure. `SLCA_THREADS` caps the worker
//! pool used by every command.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::alignment::{align_classifier, AlignConfig};
use crate::analysis::{cka, linear_probe, FeatureSnapshot, ProbeConfig};
use crate::dataio::{gen_synthetic, load_dataset, make_split, save_dataset, SyntheticConfig};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{HeadConfig, Model, RepresentationHead};
use crate::optimizer::OptimizerConfig;
use crate::protocol::{run_stream, Method, RunConfig, RunReport, TaskStream, DEFAULT_UNIFORM_LR};
use crate::rng::RngState;
use crate::stats::{CovarianceMode, StatsBank};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const THREADS_ENV: &str = "SLCA_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "slca",
    version,
    about = "Class-incremental learning with a slow learner and classifier alignment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a method over a class-incremental split of a feature file.
    Run(Box<RunArgs>),
    /// Write a synthetic Gaussian benchmark.
    GenSynth(GenSynthArgs),
    /// Linear-probe accuracy of a feature file or snapshot.
    Probe(ProbeArgs),
    /// Linear CKA between two snapshots of the same probe set.
    Cka(CkaArgs),
    /// Align a saved classifier against a saved statistics bank.
    AlignOnly(AlignOnlyArgs),
    /// Pass a feature file through a saved model's representation head.
    Snapshot(SnapshotArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum HeadKind {
    Identity,
    Mlp,
}

/// Every `run` setting. All fields are optional so the config file and the
/// command line can be layered.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct RunArgs {
    /// SLCF feature file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// seq_ft_uniform, seq_ft_fixed_rep, fixed_rep_ca, fixed_rep_ca_ln, sl, sl_ca, sl_ca_ln or joint [default: sl_ca_ln]
    #[arg(long)]
    method: Option<String>,
    /// Number of tasks [default: 10]
    #[arg(long)]
    tasks: Option<usize>,
    /// Seed for the class order, initialization, shuffling and sampling [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Representation learning rate [default: 0.0001]
    #[arg(long)]
    lr_rep: Option<f64>,
    /// Classifier learning rate [default: 0.01]
    #[arg(long)]
    lr_cls: Option<f64>,
    /// Learning rate of both groups for seq_ft_uniform [default: 0.005]
    #[arg(long)]
    uniform_lr: Option<f64>,
    /// SGD momentum [default: 0.9]
    #[arg(long)]
    momentum: Option<f64>,
    /// Weight decay [default: 0]
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Mini-batch size [default: 128]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Epochs per task [default: 20]
    #[arg(long)]
    epochs: Option<usize>,
    /// Alignment epochs [default: 5]
    #[arg(long)]
    align_epochs: Option<usize>,
    /// Alignment learning rate [default: 0.01]
    #[arg(long)]
    align_lr: Option<f64>,
    /// Logit-normalization temperature [default: 0.1]
    #[arg(long)]
    tau: Option<f64>,
    /// Features sampled per class during alignment [default: 256]
    #[arg(long)]
    samples_per_class: Option<usize>,
    /// Store diagonal instead of full covariances.
    #[arg(long, num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    diag_cov: Option<bool>,
    /// Align with plain cross-entropy even for *_ln methods.
    #[arg(long, num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    no_logit_norm: Option<bool>,
    /// Representation head [default: identity]
    #[arg(long, value_enum)]
    head: Option<HeadKind>,
    /// MLP hidden width [default: 128]
    #[arg(long)]
    hidden: Option<usize>,
    /// MLP output width [default: 64]
    #[arg(long)]
    out_dim: Option<usize>,
    /// MLP layer count [default: 2]
    #[arg(long)]
    layers: Option<usize>,
    /// JSON report path.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Final model (SLCM) path.
    #[arg(long)]
    model_out: Option<PathBuf>,
    /// Final statistics bank (SLCS) path.
    #[arg(long)]
    stats_out: Option<PathBuf>,
    /// TOML file with the same keys as the long flags; flags win.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

macro_rules! layer {
    ($base:ident, $over:ident, $($f:ident),*) => {
        RunArgs { $($f: $over.$f.or($base.$f),)* }
    };
}

impl RunArgs {
    fn overlay(self, base: RunArgs) -> RunArgs {
        let over = self;
        layer!(
            base,
            over,
            data,
            method,
            tasks,
            seed,
            lr_rep,
            lr_cls,
            uniform_lr,
            momentum,
            weight_decay,
            batch_size,
            epochs,
            align_epochs,
            align_lr,
            tau,
            samples_per_class,
            diag_cov,
            no_logit_norm,
            head,
            hidden,
            out_dim,
            layers,
            output,
            model_out,
            stats_out,
            config
        )
    }

    fn run_config(&self) -> Result<RunConfig> {
        let method: Method = self.method.as_deref().unwrap_or("sl_ca_ln").parse()?;
        let defaults = RunConfig::default();
        let head = match self.head.unwrap_or(HeadKind::Identity) {
            HeadKind::Identity => HeadConfig::Identity,
            HeadKind::Mlp => {
                let (hidden, out_dim, layers) = (
                    self.hidden.unwrap_or(128),
                    self.out_dim.unwrap_or(64),
                    self.layers.unwrap_or(2),
                );
                if hidden == 0 || out_dim == 0 || layers == 0 {
                    return Err(Error::InvalidConfig(
                        "mlp hidden, out-dim and layers must be positive".into(),
                    ));
                }
                HeadConfig::Mlp {
                    hidden,
                    out_dim,
                    layers,
                }
            }
        };
        let opt = OptimizerConfig::default();
        let align = AlignConfig::default();
        let config = RunConfig {
            method,
            head,
            optimizer: OptimizerConfig {
                lr_rep: self.lr_rep.unwrap_or(opt.lr_rep),
                lr_cls: self.lr_cls.unwrap_or(opt.lr_cls),
                momentum: self.momentum.unwrap_or(opt.momentum),
                weight_decay: self.weight_decay.unwrap_or(opt.weight_decay),
                batch_size: self.batch_size.unwrap_or(opt.batch_size),
                epochs_per_task: self.epochs.unwrap_or(opt.epochs_per_task),
            },
            uniform_lr: self.uniform_lr.unwrap_or(DEFAULT_UNIFORM_LR),
            align: AlignConfig {
                samples_per_class: self.samples_per_class.unwrap_or(align.samples_per_class),
                tau: self.tau.unwrap_or(align.tau),
                epochs: self.align_epochs.unwrap_or(align.epochs),
                lr: self.align_lr.unwrap_or(align.lr),
                logit_norm: !self.no_logit_norm.unwrap_or(false),
                ..align
            },
            covariance_mode: if self.diag_cov.unwrap_or(false) {
                CovarianceMode::Diagonal
            } else {
                CovarianceMode::Full
            },
            seed: self.seed.unwrap_or(defaults.seed),
            evaluate: true,
        };
        config.validate()?;
        if self.tasks == Some(0) {
            return Err(Error::InvalidConfig("tasks must be at least 1".into()));
        }
        Ok(config)
    }
}

#[derive(Debug, Args)]
struct GenSynthArgs {
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Distance of every class mean from the origin.
    #[arg(long, default_value_t = 8.0)]
    sep: f64,
    #[arg(long, default_value_t = 100)]
    train_per_class: usize,
    #[arg(long, default_value_t = 50)]
    test_per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    /// SLCF feature file or SLCP snapshot.
    #[arg(long)]
    data: PathBuf,
    /// Probe the features of this model's head instead of the raw features.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
}

#[derive(Debug, Args)]
struct CkaArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
}

#[derive(Debug, Args)]
struct AlignOnlyArgs {
    /// Model (SLCM) whose classifier is aligned.
    #[arg(long)]
    model: PathBuf,
    /// Statistics bank (SLCS) covering every class of the classifier.
    #[arg(long)]
    stats: PathBuf,
    /// Output model [default: <model>.aligned.slcm]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    align_epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    align_lr: f64,
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
    #[arg(long, default_value_t = 256)]
    samples_per_class: usize,
    #[arg(long)]
    no_logit_norm: bool,
}

#[derive(Debug, Args)]
struct SnapshotArgs {
    #[arg(long)]
    model: PathBuf,
    /// SLCF feature file providing the probe inputs.
    #[arg(long)]
    data: PathBuf,
    /// Tag stored in the snapshot [default: model file stem]
    #[arg(long)]
    tag: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_io() {
        EXIT_IO
    } else if err.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_CONFIG
    }
}

/// Entry point shared by the binary and the tests. `args` includes the
/// program name.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let pool = match thread_pool() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let result = pool.install(|| match cli.command {
        Command::Run(args) => cmd_run(*args),
        Command::GenSynth(args) => cmd_gen_synth(&args),
        Command::Probe(args) => cmd_probe(&args),
        Command::Cka(args) => cmd_cka(&args),
        Command::AlignOnly(args) => cmd_align_only(&args),
        Command::Snapshot(args) => cmd_snapshot(&args),
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(raw) = std::env::var(THREADS_ENV) {
        let n: usize =
            raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
                Error::InvalidConfig(format!("{THREADS_ENV} must be a positive integer, got '{raw}'"))
            })?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))
}

fn read_config_file(path: &Path) -> Result<RunArgs> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {}", path.display(), e.message())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes)?;
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let args = match &args.config {
        Some(path) => args.clone().overlay(read_config_file(path)?),
        None => args,
    };
    let config = args.run_config()?;
    let data = args
        .data
        .clone()
        .ok_or_else(|| Error::InvalidConfig("--data is required".into()))?;
    let num_tasks = args.tasks.unwrap_or(10);

    let dataset = load_dataset(&data)?;
    let split = make_split(&dataset.benchmark_classes(), num_tasks, config.seed)?;
    let stream = TaskStream::from_dataset(&dataset, &split)?;
    let outcome = run_stream(&stream, &config)?;
    let report = RunReport::new(&outcome, &config, &split, Some(data.display().to_string()))?;

    println!("method {}  tasks {}  seed {}", config.method, num_tasks, config.seed);
    for (t, a) in report.per_task_acc.iter().enumerate() {
        println!("  after task {:>2}: {:.4}", t + 1, a);
    }
    println!("Last-Acc {:.4}", report.last_acc);
    println!("Inc-Acc  {:.4}", report.inc_acc);

    if let Some(path) = &args.output {
        let mut json = report.to_json();
        json.push('\n');
        write_file(path, json.as_bytes())?;
    }
    if let Some(path) = &args.model_out {
        outcome.model.save(path)?;
    }
    if let Some(path) = &args.stats_out {
        outcome.bank.save(path)?;
    }
    Ok(())
}

fn cmd_gen_synth(args: &GenSynthArgs) -> Result<()> {
    let dataset = gen_synthetic(&SyntheticConfig {
        num_classes: args.classes,
        dim: args.dim,
        train_per_class: args.train_per_class,
        test_per_class: args.test_per_class,
        separation: args.sep,
        seed: args.seed,
    })?;
    save_dataset(&dataset, &args.out)?;
    println!(
        "wrote {} records of dim {} to {}",
        dataset.len(),
        dataset.feature_dim(),
        args.out.display()
    );
    Ok(())
}

fn project(snapshot: &FeatureSnapshot, head: &RepresentationHead) -> Result<FeatureSnapshot> {
    if head.input_dim() != snapshot.features.cols() {
        return Err(Error::DimensionMismatch {
            expected: head.input_dim(),
            found: snapshot.features.cols(),
        });
    }
    let rows = (0..snapshot.rows())
        .map(|i| head.features(snapshot.features.row(i)))
        .collect::<Result<Vec<_>>>()?;
    FeatureSnapshot::new(
        snapshot.tag.clone(),
        Matrix::from_rows(&rows)?,
        snapshot.labels.clone(),
        snapshot.splits.clone(),
    )
}

fn cmd_probe(args: &ProbeArgs) -> Result<()> {
    let config = ProbeConfig {
        lr: args.lr,
        epochs: args.epochs,
        seed: args.seed,
        ..ProbeConfig::default()
    };
    if !(config.lr > 0.0 && config.lr.is_finite()) || config.epochs == 0 {
        return Err(Error::InvalidConfig("probe lr and epochs must be positive".into()));
    }
    let mut snapshot = FeatureSnapshot::load(&args.data)?;
    if let Some(path) = &args.model {
        snapshot = project(&snapshot, &Model::load(path)?.head)?;
    }
    let acc = linear_probe(&snapshot, &config)?;
    println!("probe accuracy {acc:.6}");
    Ok(())
}

fn cmd_cka(args: &CkaArgs) -> Result<()> {
    let a = FeatureSnapshot::load(&args.a)?;
    let b = FeatureSnapshot::load(&args.b)?;
    println!("{:.6}", cka(&a, &b)?);
    Ok(())
}

fn cmd_align_only(args: &AlignOnlyArgs) -> Result<()> {
    let config = AlignConfig {
        samples_per_class: args.samples_per_class,
        tau: args.tau,
        epochs: args.align_epochs,
        lr: args.align_lr,
        logit_norm: !args.no_logit_norm,
        ..AlignConfig::default()
    };
    config.validate()?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.model.with_extension("aligned.slcm"));
    let mut model = Model::load(&args.model)?;
    let bank = StatsBank::load(&args.stats)?;
    model.classifier = align_classifier(&model.classifier, &bank, &config, &mut RngState::new(args.seed))?;
    model.save(&out)?;
    println!(
        "wrote aligned model ({} classes) to {}",
        model.classifier.num_classes(),
        out.display()
    );
    Ok(())
}

fn cmd_snapshot(args: &SnapshotArgs) -> Result<()> {
    let tag = args.tag.clone().unwrap_or_else(|| {
        args.model
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let model = Model::load(&args.model)?;
    let dataset = load_dataset(&args.data)?;
    let snapshot = project(&FeatureSnapshot::from_dataset(tag, &dataset)?, &model.head)?;
    snapshot.save(&args.out)?;
    println!(
        "wrote {} x {} snapshot to {}",
        snapshot.rows(),
        snapshot.features.cols(),
        args.out.display()
    );
    Ok(())
}
