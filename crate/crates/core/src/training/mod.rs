//! Masked reconstruction objective, optimizer, schedules, training loops and
//! checkpoints.

mod checkpoint;
mod finetune;
mod loss;
mod metrics;
mod optim;
mod pretrain;
mod temporal;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::masking::{MaskConfig, Strategy};

pub use checkpoint::{config_hash, Checkpoint};
pub use finetune::{classifier_checkpoint, finetune, load_classifier, predict_all, Finetuner};
pub use loss::{masked_loss, LossKind, NORM_FORM_EPS};
pub use metrics::{write_loss_csv, MetricRecord, MetricsSink};
pub use optim::{clip_grad_norm, lr_schedule, AdamW};
pub use pretrain::{Pretrainer, StepStats};
pub use temporal::{gru_checkpoint, load_gru, train_temporal, GRU_HIDDEN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Optimizer steps for pretraining.
    pub steps: usize,
    /// Passes over the labelled set for fine-tuning and the temporal model.
    pub epochs: usize,
    pub batch_size: usize,
    pub mask: MaskConfig,
    pub loss: LossKind,
    /// Standardize each target patch before the loss.
    pub normalize: bool,
    /// Global gradient-norm bound.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub layer_decay: f64,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            base_lr: 1e-3,
            betas: (0.9, 0.95),
            weight_decay: 0.05,
            warmup_steps: 20,
            steps: 200,
            epochs: 1,
            batch_size: 8,
            mask: MaskConfig {
                strategy: Strategy::SurgMae,
                ratio: 0.9,
                ..MaskConfig::default()
            },
            loss: LossKind::Mse,
            normalize: true,
            grad_clip: Some(0.02),
            seed: 0,
            layer_decay: 1.0,
        }
    }

    pub fn finetune() -> Self {
        Self {
            base_lr: 1e-3,
            betas: (0.9, 0.999),
            weight_decay: 0.05,
            warmup_steps: 5,
            steps: 0,
            epochs: 5,
            batch_size: 4,
            grad_clip: None,
            layer_decay: 0.65,
            ..Self::pretrain()
        }
    }

    pub fn temporal() -> Self {
        Self {
            base_lr: 1e-3,
            betas: (0.9, 0.999),
            weight_decay: 0.0,
            warmup_steps: 0,
            steps: 0,
            epochs: 25,
            batch_size: 1,
            grad_clip: None,
            layer_decay: 1.0,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return config_err(format!("learning rate must be positive, got {}", self.base_lr));
        }
        if !(self.mask.ratio > 0.0 && self.mask.ratio < 1.0) {
            return config_err(format!("mask ratio must lie in (0, 1), got {}", self.mask.ratio));
        }
        if !(0.0..=1.0).contains(&self.mask.alpha) {
            return config_err(format!("alpha must lie in [0, 1], got {}", self.mask.alpha));
        }
        if self.steps > 0 && self.steps < self.warmup_steps {
            return config_err(format!(
                "steps ({}) must be at least warmup steps ({})",
                self.steps, self.warmup_steps
            ));
        }
        if self.batch_size == 0 {
            return config_err("batch size must be positive");
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return config_err(format!("betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if self.weight_decay < 0.0 {
            return config_err("weight decay must be non-negative");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return config_err(format!("gradient clip must be positive, got {c}"));
            }
        }
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return config_err(format!("layer decay must lie in (0, 1], got {}", self.layer_decay));
        }
        Ok(())
    }
}

/// Mixes a run seed with counters into an independent stream seed.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::pretrain().validate().unwrap();
        let ft = TrainConfig::finetune();
        ft.validate().unwrap();
        assert_eq!(ft.layer_decay, 0.65);
        assert_eq!(TrainConfig::temporal().epochs, 25);
    }

    #[test]
    fn invalid_rejected() {
        let mut c = TrainConfig::pretrain();
        c.warmup_steps = 300;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::pretrain();
        c.base_lr = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::pretrain();
        c.mask.ratio = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn seeds_differ() {
        assert_ne!(mix_seed(1, 0, 0), mix_seed(1, 1, 0));
        assert_ne!(mix_seed(1, 0, 1), mix_seed(1, 1, 0));
        assert_eq!(mix_seed(3, 4, 5), mix_seed(3, 4, 5));
    }
}
