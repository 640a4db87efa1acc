//! Mini-batch SGD with a separate learning rate per parameter group.
//!
//! The representation group gets `lr_rep` and the classifier group gets
//! `lr_cls`; keeping `lr_rep` much smaller than `lr_cls` is the slow-learner
//! regime. Learning rates stay constant for the whole task.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gradients, ParamGroups};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr_rep: f64,
    pub lr_cls: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs_per_task: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr_rep: 0.0001,
            lr_cls: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 128,
            epochs_per_task: 20,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.lr_rep > 0.0 && self.lr_rep.is_finite()) {
            return bad(format!("lr_rep must be positive, got {}", self.lr_rep));
        }
        if !(self.lr_cls > 0.0 && self.lr_cls.is_finite()) {
            return bad(format!("lr_cls must be positive, got {}", self.lr_cls));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.epochs_per_task == 0 {
            return bad("epochs_per_task must be positive".into());
        }
        Ok(())
    }

    /// Whether the representation learns strictly slower than the classifier.
    pub fn is_slow_learner(&self) -> bool {
        self.lr_rep < self.lr_cls
    }
}

/// Defaults with one learning rate for both groups.
pub fn uniform_lr_config(lr: f64) -> Result<OptimizerConfig> {
    let config = OptimizerConfig {
        lr_rep: lr,
        lr_cls: lr,
        ..OptimizerConfig::default()
    };
    config.validate()?;
    Ok(config)
}

/// SGD state: momentum buffers, lazily shaped on the first step.
#[derive(Debug, Clone)]
pub struct Sgd {
    config: OptimizerConfig,
    freeze_rep: bool,
    rep_velocity: Vec<Vec<f64>>,
    cls_velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            freeze_rep: false,
            rep_velocity: Vec::new(),
            cls_velocity: Vec::new(),
        })
    }

    /// Leaves the representation group untouched on every step.
    pub fn with_frozen_rep(mut self) -> Self {
        self.freeze_rep = true;
        self
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// One update: `v ← μ·v + (g + λ·w)`, `w ← w − lr·v`, per group.
    pub fn step(&mut self, params: ParamGroups<'_>, grads: &Gradients) -> Result<()> {
        let ParamGroups { rep, cls } = params;
        let c = self.config;
        if !self.freeze_rep {
            update_group(
                rep,
                &grads.rep,
                &mut self.rep_velocity,
                c.lr_rep,
                c.momentum,
                c.weight_decay,
            )?;
        }
        update_group(
            cls,
            &grads.cls,
            &mut self.cls_velocity,
            c.lr_cls,
            c.momentum,
            c.weight_decay,
        )
    }
}

/// Free-function form of [`Sgd::step`].
pub fn sgd_step(params: ParamGroups<'_>, grads: &Gradients, state: &mut Sgd) -> Result<()> {
    state.step(params, grads)
}

fn update_group(
    params: Vec<&mut [f64]>,
    grads: &[Vec<f64>],
    velocity: &mut Vec<Vec<f64>>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            found: grads.len(),
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.len() != g.len() {
            return Err(Error::DimensionMismatch {
                expected: p.len(),
                found: g.len(),
            });
        }
    }
    let shapes_match = velocity.len() == params.len() && velocity.iter().zip(&params).all(|(v, p)| v.len() == p.len());
    if !shapes_match {
        *velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
    }
    for ((p, g), v) in params.into_iter().zip(grads).zip(velocity.iter_mut()) {
        for ((w, &gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            let step = gi + weight_decay * *w;
            *vi = momentum * *vi + step;
            *w -= lr * *vi;
        }
    }
    Ok(())
}
