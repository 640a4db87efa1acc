//! Post-hoc classifier alignment.
//!
//! Features are sampled from the stored Gaussian of every seen class, pooled,
//! and used to fine-tune a copy of the classifier with the logit-normalized
//! loss (or plain cross-entropy when normalization is disabled). The
//! representation is never consulted: alignment works purely in feature space.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::losses::{LossKind, DEFAULT_TAU};
use crate::model::{Classifier, ParamGroups};
use crate::optimizer::{OptimizerConfig, Sgd};
use crate::rng::RngState;
use crate::stats::{sample_class_features, StatsBank, DEFAULT_SAMPLES_PER_CLASS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub samples_per_class: usize,
    pub tau: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub logit_norm: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            samples_per_class: DEFAULT_SAMPLES_PER_CLASS,
            tau: DEFAULT_TAU,
            epochs: 5,
            batch_size: 128,
            lr: 0.01,
            momentum: 0.9,
            logit_norm: true,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_class == 0 {
            return Err(Error::InvalidConfig("samples_per_class must be at least 1".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "alignment lr must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("alignment batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "alignment momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    pub fn loss(&self) -> LossKind {
        if self.logit_norm {
            LossKind::LogitNorm { tau: self.tau }
        } else {
            LossKind::SoftmaxCe
        }
    }
}

/// Samples `samples_per_class` features for every class of `classifier`.
///
/// Each class draws from its own sub-stream of `rng`, keyed by class id, so the
/// result does not depend on thread scheduling.
pub fn sample_pool(
    classifier: &Classifier,
    bank: &StatsBank,
    samples_per_class: usize,
    rng: &RngState,
) -> Result<Vec<(u32, Vector)>> {
    if bank.dim() != classifier.dim() {
        return Err(Error::DimensionMismatch {
            expected: classifier.dim(),
            found: bank.dim(),
        });
    }
    let per_class = classifier
        .classes()
        .par_iter()
        .map(|&c| {
            let stats = bank.get(c).ok_or(Error::MissingClassStats(c))?;
            let mut class_rng = rng.fork(u64::from(c));
            let xs = sample_class_features(stats, samples_per_class, &mut class_rng)?;
            Ok(xs.into_iter().map(|x| (c, x)).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_class.into_iter().flatten().collect())
}

/// Returns an aligned copy of `classifier`; the input is left untouched.
pub fn align_classifier(
    classifier: &Classifier,
    bank: &StatsBank,
    config: &AlignConfig,
    rng: &mut RngState,
) -> Result<Classifier> {
    config.validate()?;
    let mut aligned = classifier.clone();
    if aligned.num_classes() == 0 {
        return Ok(aligned);
    }
    let pool = sample_pool(classifier, bank, config.samples_per_class, &rng.fork(0))?;
    let loss = config.loss();
    let mask = aligned.full_mask();
    let mut sgd = Sgd::new(OptimizerConfig {
        lr_rep: config.lr,
        lr_cls: config.lr,
        momentum: config.momentum,
        weight_decay: 0.0,
        batch_size: config.batch_size,
        epochs_per_task: config.epochs.max(1),
    })?
    .with_frozen_rep();

    let mut order: Vec<usize> = (0..pool.len()).collect();
    for _ in 0..config.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(config.batch_size) {
            let mut grad_w = vec![0.0; aligned.num_classes() * aligned.dim()];
            let mut grad_b = vec![0.0; aligned.num_classes()];
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (label, x) = &pool[i];
                let (_, [gw, gb], _) = aligned.backward(x, *label, &mask, loss)?;
                crate::linalg::axpy(scale, &gw, &mut grad_w);
                crate::linalg::axpy(scale, &gb, &mut grad_b);
            }
            let grads = crate::model::Gradients {
                rep: Vec::new(),
                cls: vec![grad_w, grad_b],
                loss: 0.0,
            };
            sgd.step(
                ParamGroups {
                    rep: Vec::new(),
                    cls: aligned.params_mut(),
                },
                &grads,
            )?;
        }
    }
    if aligned.bias().iter().any(|b| !b.is_finite()) {
        return Err(Error::NonFinite("aligned classifier"));
    }
    Ok(aligned)
}
