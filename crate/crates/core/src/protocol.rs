//! The class-incremental training loop, its ablation baselines and the
//! evaluation metrics.
//!
//! For every task the classifier grows by the task's classes, the network is
//! trained with cross-entropy restricted to those classes, per-class feature
//! statistics are collected when the method uses alignment, and accuracy over
//! every class seen so far is recorded. Alignment, when active, is applied to
//! a copy of the classifier used only for evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{align_classifier, AlignConfig};
use crate::dataio::{Dataset, Split, SplitSpec};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::model::{Classifier, HeadConfig, Model, RepresentationHead};
use crate::optimizer::{OptimizerConfig, Sgd};
use crate::rng::RngState;
use crate::stats::{CovarianceMode, StatsBank};

/// Learning rate of the uniform sequential fine-tuning baseline.
pub const DEFAULT_UNIFORM_LR: f64 = 0.005;

// sub-stream keys of the run seed
const STREAM_HEAD_INIT: u64 = 1;
const STREAM_CLASSIFIER_INIT: u64 = 1_000;
const STREAM_TRAIN: u64 = 2_000;
const STREAM_ALIGN: u64 = 3_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub classes: BTreeSet<u32>,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

/// Ordered tasks with pairwise-disjoint class sets.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    input_dim: usize,
    tasks: Vec<Task>,
}

impl TaskStream {
    pub fn new(tasks: Vec<Task>) -> Result<Self> {
        let first = tasks.first().ok_or(Error::Empty("task stream"))?;
        let input_dim = first
            .train
            .iter()
            .chain(&first.test)
            .map(|e| e.x.len())
            .next()
            .ok_or(Error::Empty("first task has no examples"))?;
        let mut seen = BTreeSet::new();
        for (t, task) in tasks.iter().enumerate() {
            if task.classes.is_empty() {
                return Err(Error::InvalidConfig(format!("task {t} has no classes")));
            }
            if task.train.is_empty() {
                return Err(Error::InvalidConfig(format!("task {t} has no training examples")));
            }
            for &c in &task.classes {
                if !seen.insert(c) {
                    return Err(Error::InvalidConfig(format!("class {c} appears in more than one task")));
                }
            }
            for e in task.train.iter().chain(&task.test) {
                if !task.classes.contains(&e.y) {
                    return Err(Error::InvalidConfig(format!(
                        "task {t} example labeled {} outside its classes",
                        e.y
                    )));
                }
                if e.x.len() != input_dim {
                    return Err(Error::DimensionMismatch {
                        expected: input_dim,
                        found: e.x.len(),
                    });
                }
                if e.x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("example features"));
                }
            }
        }
        Ok(Self { input_dim, tasks })
    }

    /// Groups the dataset's records by the split's class sets, widening
    /// features to `f64`.
    pub fn from_dataset(dataset: &Dataset, split: &SplitSpec) -> Result<Self> {
        let mut task_of = BTreeMap::new();
        for (t, classes) in split.tasks.iter().enumerate() {
            for &c in classes {
                if task_of.insert(c, t).is_some() {
                    return Err(Error::InvalidConfig(format!("class {c} appears in more than one task")));
                }
            }
        }
        let mut tasks: Vec<Task> = split
            .tasks
            .iter()
            .map(|classes| Task {
                classes: classes.clone(),
                train: Vec::new(),
                test: Vec::new(),
            })
            .collect();
        for r in dataset.records() {
            if let Some(&t) = task_of.get(&r.class_id) {
                let e = Example {
                    x: r.features.iter().map(|&v| f64::from(v)).collect(),
                    y: r.class_id,
                };
                match r.split {
                    Split::Train => tasks[t].train.push(e),
                    Split::Test => tasks[t].test.push(e),
                }
            }
        }
        Self::new(tasks)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn classes_up_to(&self, up_to_task: usize) -> BTreeSet<u32> {
        self.tasks[..up_to_task.min(self.tasks.len())]
            .iter()
            .flat_map(|t| t.classes.iter().copied())
            .collect()
    }
}

/// How the representation group is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RepRegime {
    /// One learning rate (`uniform_lr`) for both groups.
    Uniform,
    /// Representation never updated.
    Frozen,
    /// `lr_rep` for the representation, `lr_cls` for the classifier.
    TwoRate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SeqFtUniform,
    SeqFtFixedRep,
    FixedRepCa,
    FixedRepCaLn,
    Sl,
    SlCa,
    SlCaLn,
    Joint,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::SeqFtUniform,
        Method::SeqFtFixedRep,
        Method::FixedRepCa,
        Method::FixedRepCaLn,
        Method::Sl,
        Method::SlCa,
        Method::SlCaLn,
        Method::Joint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::SeqFtUniform => "seq_ft_uniform",
            Method::SeqFtFixedRep => "seq_ft_fixed_rep",
            Method::FixedRepCa => "fixed_rep_ca",
            Method::FixedRepCaLn => "fixed_rep_ca_ln",
            Method::Sl => "sl",
            Method::SlCa => "sl_ca",
            Method::SlCaLn => "sl_ca_ln",
            Method::Joint => "joint",
        }
    }

    pub fn rep_regime(self) -> RepRegime {
        match self {
            Method::SeqFtUniform => RepRegime::Uniform,
            Method::SeqFtFixedRep | Method::FixedRepCa | Method::FixedRepCaLn => RepRegime::Frozen,
            Method::Sl | Method::SlCa | Method::SlCaLn | Method::Joint => RepRegime::TwoRate,
        }
    }

    /// `Some(logit_norm)` for methods that align the classifier.
    pub fn alignment(self) -> Option<bool> {
        match self {
            Method::FixedRepCa | Method::SlCa => Some(false),
            Method::FixedRepCaLn | Method::SlCaLn => Some(true),
            _ => None,
        }
    }

    /// Methods bound by the requirement `lr_rep < lr_cls`.
    pub fn requires_slow_rep(self) -> bool {
        matches!(self, Method::Sl | Method::SlCa | Method::SlCaLn)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.replace(['-', '+'], "_").to_ascii_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: Method,
    pub head: HeadConfig,
    pub optimizer: OptimizerConfig,
    /// Learning rate of both groups under [`Method::SeqFtUniform`].
    pub uniform_lr: f64,
    pub align: AlignConfig,
    pub covariance_mode: CovarianceMode,
    pub seed: u64,
    /// When false no evaluation (and hence no alignment) is performed.
    pub evaluate: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::SlCaLn,
            head: HeadConfig::Identity,
            optimizer: OptimizerConfig::default(),
            uniform_lr: DEFAULT_UNIFORM_LR,
            align: AlignConfig::default(),
            covariance_mode: CovarianceMode::Full,
            seed: 0,
            evaluate: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.align.validate()?;
        if !(self.uniform_lr > 0.0 && self.uniform_lr.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "uniform_lr must be positive, got {}",
                self.uniform_lr
            )));
        }
        if self.method.requires_slow_rep() && !self.optimizer.is_slow_learner() {
            return Err(Error::InvalidConfig(format!(
                "method {} requires lr_rep < lr_cls (got {} >= {})",
                self.method, self.optimizer.lr_rep, self.optimizer.lr_cls
            )));
        }
        Ok(())
    }

    /// Optimizer settings actually used for continual training.
    pub fn training_optimizer(&self) -> OptimizerConfig {
        match self.method.rep_regime() {
            RepRegime::Uniform => OptimizerConfig {
                lr_rep: self.uniform_lr,
                lr_cls: self.uniform_lr,
                ..self.optimizer
            },
            _ => self.optimizer,
        }
    }

    /// Alignment settings for this method, if it aligns at all.
    pub fn effective_alignment(&self) -> Option<AlignConfig> {
        self.method.alignment().map(|ln| AlignConfig {
            logit_norm: ln && self.align.logit_norm,
            ..self.align
        })
    }
}

/// After-task accuracies `a_t` over all classes seen so far.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub entries: Vec<f64>,
}

impl AccuracyMatrix {
    pub fn new(entries: Vec<f64>) -> Self {
        Self { entries }
    }

    pub fn last_acc(&self) -> Result<f64> {
        last_acc(self)
    }

    pub fn inc_acc(&self) -> Result<f64> {
        inc_acc(self)
    }
}

/// Accuracy after the final task.
pub fn last_acc(m: &AccuracyMatrix) -> Result<f64> {
    m.entries.last().copied().ok_or(Error::Empty("accuracy matrix"))
}

/// Mean of the after-task accuracies.
pub fn inc_acc(m: &AccuracyMatrix) -> Result<f64> {
    if m.entries.is_empty() {
        return Err(Error::Empty("accuracy matrix"));
    }
    Ok(m.entries.iter().sum::<f64>() / m.entries.len() as f64)
}

fn accuracy_on<'a>(
    head: &RepresentationHead,
    classifier: &Classifier,
    examples: impl ParallelIterator<Item = &'a Example>,
) -> Result<(usize, usize)> {
    examples
        .map(|e| {
            let f = head.features(&e.x)?;
            let hit = classifier.predict(&f)? == Some(e.y);
            Ok((usize::from(hit), 1usize))
        })
        .try_reduce(|| (0, 0), |a, b| Ok((a.0 + b.0, a.1 + b.1)))
}

/// Accuracy over the test sets of tasks `1..=up_to_task`, predicting by argmax
/// over every active class of `classifier`. No task identity is used.
pub fn evaluate_with(
    head: &RepresentationHead,
    classifier: &Classifier,
    stream: &TaskStream,
    up_to_task: usize,
) -> Result<f64> {
    if up_to_task == 0 || up_to_task > stream.num_tasks() {
        return Err(Error::InvalidConfig(format!(
            "cannot evaluate up to task {up_to_task} of {}",
            stream.num_tasks()
        )));
    }
    let (correct, total) = accuracy_on(
        head,
        classifier,
        stream.tasks[..up_to_task].par_iter().flat_map(|t| t.test.par_iter()),
    )?;
    if total == 0 {
        return Err(Error::Empty("test examples"));
    }
    Ok(correct as f64 / total as f64)
}

pub fn evaluate(model: &Model, stream: &TaskStream, up_to_task: usize) -> Result<f64> {
    evaluate_with(&model.head, &model.classifier, stream, up_to_task)
}

/// Accuracy on the test set of a single task (0-based), still predicting over
/// every active class.
pub fn evaluate_task(
    head: &RepresentationHead,
    classifier: &Classifier,
    stream: &TaskStream,
    task: usize,
) -> Result<f64> {
    let t = stream
        .tasks
        .get(task)
        .ok_or_else(|| Error::InvalidConfig(format!("no task {task}")))?;
    let (correct, total) = accuracy_on(head, classifier, t.test.par_iter())?;
    if total == 0 {
        return Err(Error::Empty("test examples"));
    }
    Ok(correct as f64 / total as f64)
}

/// Trains on `examples` for the configured epochs with cross-entropy over
/// the classes in `mask_classes`.
pub(crate) fn train_examples(
    model: &mut Model,
    examples: &[&Example],
    mask_classes: &BTreeSet<u32>,
    optimizer: OptimizerConfig,
    freeze_rep: bool,
    rng: &mut RngState,
) -> Result<()> {
    let mask = model.classifier.mask(mask_classes)?;
    let mut sgd = Sgd::new(optimizer)?;
    if freeze_rep {
        sgd = sgd.with_frozen_rep();
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for _ in 0..optimizer.epochs_per_task {
        rng.shuffle(&mut order);
        for batch in order.chunks(optimizer.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut grads = model.zero_gradients();
            for &i in batch {
                let e = examples[i];
                let g = model.backward(&e.x, e.y, &mask, LossKind::SoftmaxCe)?;
                grads.add_scaled(&g, scale)?;
            }
            if !grads.loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            sgd.step(model.param_groups_mut(), &grads)?;
        }
    }
    Ok(())
}

fn collect_task_stats(model: &Model, task: &Task, bank: &mut StatsBank) -> Result<()> {
    let mut by_class: BTreeMap<u32, Vec<Vec<f64>>> = task.classes.iter().map(|&c| (c, Vec::new())).collect();
    let features = task
        .train
        .par_iter()
        .map(|e| Ok((e.y, model.head.features(&e.x)?)))
        .collect::<Result<Vec<_>>>()?;
    for (y, f) in features {
        by_class.get_mut(&y).expect("label within task").push(f);
    }
    by_class.retain(|_, v| !v.is_empty());
    bank.collect(&by_class)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: Model,
    pub bank: StatsBank,
    pub accuracy: AccuracyMatrix,
    pub wall_time_secs: f64,
}

/// Runs one method over the stream.
pub fn run_stream(stream: &TaskStream, config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    let start = Instant::now();
    let root = RngState::new(config.seed);
    let head = config
        .head
        .build(stream.input_dim(), &mut root.fork(STREAM_HEAD_INIT))?;
    let mut model = Model::new(head);
    let mut bank = StatsBank::new(model.head.output_dim(), config.covariance_mode);
    let optimizer = config.training_optimizer();
    let freeze_rep = config.method.rep_regime() == RepRegime::Frozen;
    let alignment = config.effective_alignment();
    let mut entries = Vec::new();

    if config.method == Method::Joint {
        let all = stream.classes_up_to(stream.num_tasks());
        model.extend_classifier(&all, &mut root.fork(STREAM_CLASSIFIER_INIT))?;
        let examples: Vec<&Example> = stream.tasks.iter().flat_map(|t| t.train.iter()).collect();
        train_examples(
            &mut model,
            &examples,
            &all,
            optimizer,
            freeze_rep,
            &mut root.fork(STREAM_TRAIN),
        )?;
        if config.evaluate {
            entries.push(evaluate(&model, stream, stream.num_tasks())?);
        }
    } else {
        for (t, task) in stream.tasks.iter().enumerate() {
            let t_key = t as u64;
            model.extend_classifier(&task.classes, &mut root.fork(STREAM_CLASSIFIER_INIT + t_key))?;
            let examples: Vec<&Example> = task.train.iter().collect();
            train_examples(
                &mut model,
                &examples,
                &task.classes,
                optimizer,
                freeze_rep,
                &mut root.fork(STREAM_TRAIN + t_key),
            )?;
            if alignment.is_some() {
                collect_task_stats(&model, task, &mut bank)?;
            }
            if config.evaluate {
                let acc = match &alignment {
                    Some(align) => {
                        let aligned =
                            align_classifier(&model.classifier, &bank, align, &mut root.fork(STREAM_ALIGN + t_key))?;
                        evaluate_with(&model.head, &aligned, stream, t + 1)?
                    }
                    None => evaluate(&model, stream, t + 1)?,
                };
                entries.push(acc);
            }
        }
    }

    Ok(RunOutcome {
        model,
        bank,
        accuracy: AccuracyMatrix::new(entries),
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Final aligned classifier for a finished run, or the plain classifier when
/// the method does not align.
pub fn final_classifier(outcome: &RunOutcome, config: &RunConfig, num_tasks: usize) -> Result<Classifier> {
    match config.effective_alignment() {
        Some(align) => align_classifier(
            &outcome.model.classifier,
            &outcome.bank,
            &align,
            &mut RngState::new(config.seed).fork(STREAM_ALIGN + num_tasks.saturating_sub(1) as u64),
        ),
        None => Ok(outcome.model.classifier.clone()),
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty("values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok((mean, var.sqrt()))
}

/// Summary of one method over several seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedSweep {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub last_acc: Vec<f64>,
    pub inc_acc: Vec<f64>,
    pub last_acc_mean: f64,
    pub last_acc_std: f64,
    pub inc_acc_mean: f64,
    pub inc_acc_std: f64,
}

pub fn seed_sweep(stream: &TaskStream, config: &RunConfig, seeds: &[u64]) -> Result<SeedSweep> {
    let mut last = Vec::with_capacity(seeds.len());
    let mut inc = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let out = run_stream(
            stream,
            &RunConfig {
                seed,
                evaluate: true,
                ..config.clone()
            },
        )?;
        last.push(out.accuracy.last_acc()?);
        inc.push(out.accuracy.inc_acc()?);
    }
    let (last_acc_mean, last_acc_std) = mean_std(&last)?;
    let (inc_acc_mean, inc_acc_std) = mean_std(&inc)?;
    Ok(SeedSweep {
        method: config.method,
        seeds: seeds.to_vec(),
        last_acc: last,
        inc_acc: inc,
        last_acc_mean,
        last_acc_std,
        inc_acc_mean,
        inc_acc_std,
    })
}

pub const REPORT_SCHEMA: u32 = 1;

/// JSON run report. `wall_time_secs` is the only non-deterministic field and
/// is serialized last.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub schema: u32,
    pub data: Option<String>,
    pub seed: u64,
    pub method: Method,
    pub num_tasks: usize,
    pub split: Vec<Vec<u32>>,
    pub config: RunConfig,
    pub per_task_acc: Vec<f64>,
    pub last_acc: f64,
    pub inc_acc: f64,
    pub stats_storage_scalars: usize,
    pub wall_time_secs: f64,
}

impl RunReport {
    pub fn new(outcome: &RunOutcome, config: &RunConfig, split: &SplitSpec, data: Option<String>) -> Result<Self> {
        Ok(Self {
            schema: REPORT_SCHEMA,
            data,
            seed: config.seed,
            method: config.method,
            num_tasks: split.num_tasks(),
            split: split.tasks.iter().map(|t| t.iter().copied().collect()).collect(),
            config: config.clone(),
            per_task_acc: outcome.accuracy.entries.clone(),
            last_acc: outcome.accuracy.last_acc()?,
            inc_acc: outcome.accuracy.inc_acc()?,
            stats_storage_scalars: outcome.bank.storage_size(),
            wall_time_secs: outcome.wall_time_secs,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
