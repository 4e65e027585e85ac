use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::LossConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[serde(rename = "adamw")]
    AdamW,
    Sgd,
}

/// How the learning rate changes at the decay milestones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// Multiply by `decay_factor` when a milestone is reached.
    Step,
    /// Interpolate linearly between the milestone values.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Momentum of the SGD optimizer.
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub schedule: ScheduleMode,
    pub seed: u64,
    /// Random rotation / mirror of every training sample.
    pub augment: bool,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            weight_decay: 6e-5,
            optimizer: OptimizerKind::AdamW,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            momentum: 0.99,
            epochs: 100,
            batch_size: 8,
            decay_epochs: vec![20, 50, 90],
            decay_factor: 0.1,
            schedule: ScheduleMode::Step,
            seed: 0,
            augment: true,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) {
            return err(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return err(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return err(format!("betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return err(format!("decay_epochs must be strictly increasing, got {:?}", self.decay_epochs));
        }
        if self.epochs > 0 && self.decay_epochs.last().is_some_and(|&l| l >= self.epochs) {
            return err(format!("decay_epochs {:?} must be below epochs = {}", self.decay_epochs, self.epochs));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return err(format!("decay_factor must lie in (0, 1], got {}", self.decay_factor));
        }
        self.loss.validate()
    }
}

/// Learning rate in effect during `epoch` (zero-based).
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let passed = cfg.decay_epochs.iter().take_while(|&&m| m <= epoch).count();
    let step_value = |k: usize| cfg.lr * cfg.decay_factor.powi(k as i32);
    match cfg.schedule {
        ScheduleMode::Step => step_value(passed),
        ScheduleMode::Linear => {
            if passed == cfg.decay_epochs.len() {
                return step_value(passed);
            }
            let start = if passed == 0 { 0 } else { cfg.decay_epochs[passed - 1] };
            let end = cfg.decay_epochs[passed];
            let t = (epoch - start) as f64 / (end - start) as f64;
            step_value(passed) + t * (step_value(passed + 1) - step_value(passed))
        }
    }
}
