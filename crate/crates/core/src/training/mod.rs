//! Staged training: presets, input noising, optimizer and the stage loop.

pub mod noise;
pub mod optim;
pub mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::MaskKind;
use crate::model::params::Component;

pub use noise::noise_input;
pub use optim::{adamw_step, clip_grad_norm, cosine_lr, AdamW, OptimizerState};
pub use trainer::{accumulate_and_step, corpus_loss, micro_batch_loss, run_stage, CurveRow, RunOutput, StageData};

/// Hyperparameters of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: u8,
    pub mask_kind: MaskKind,
    pub lr_vision: f64,
    pub lr_projector: f64,
    pub lr_language: f64,
    pub noise_rate: f64,
    pub epochs: usize,
    pub global_batch: usize,
    pub micro_batch: usize,
    pub min_lr: f64,
    pub clip_norm: f64,
}

const MIN_LR: f64 = 1e-8;

impl StageConfig {
    /// Per-stage learning rates of the full-scale recipe, batch 128, one epoch.
    pub fn paper(stage: u8) -> Result<Self> {
        let (lr_vision, lr_projector, lr_language) = match stage {
            0 | 1 => (0.0, 1e-3, 0.0),
            2 => (5e-6, 2e-3, 2e-5),
            3 => (5e-6, 1e-4, 2e-5),
            _ => return Err(Error::Config(format!("stage must be 0..=3, got {stage}"))),
        };
        Ok(StageConfig {
            stage,
            mask_kind: Self::stage_mask(stage),
            lr_vision,
            lr_projector,
            lr_language,
            noise_rate: if stage == 0 { 0.2 } else { 0.0 },
            epochs: 1,
            global_batch: 128,
            micro_batch: 128,
            min_lr: MIN_LR,
            clip_norm: 1.0,
        })
    }

    /// Desk-scale variant: global batch 32 in micro-batches of 8, 100 epochs.
    /// Stages 2 and 3 train the whole model from random initialization, so
    /// their encoder and decoder rates are raised well above the paper's
    /// fine-tuning rates.
    pub fn desk(stage: u8) -> Result<Self> {
        let mut cfg = Self::paper(stage)?;
        cfg.global_batch = 32;
        cfg.micro_batch = 8;
        cfg.epochs = 100;
        match stage {
            2 => (cfg.lr_vision, cfg.lr_projector, cfg.lr_language) = (1e-3, 2e-3, 2e-3),
            3 => (cfg.lr_vision, cfg.lr_projector, cfg.lr_language) = (1e-4, 1e-4, 5e-4),
            _ => {}
        }
        Ok(cfg)
    }

    pub fn preset(name: &str, stage: u8) -> Result<Self> {
        match name {
            "desk" => Self::desk(stage),
            "paper" => Self::paper(stage),
            other => Err(Error::Config(format!("unknown preset {other:?}; expected desk or paper"))),
        }
    }

    pub fn stage_mask(stage: u8) -> MaskKind {
        if stage == 0 {
            MaskKind::FullBidirectional
        } else {
            MaskKind::ImageBidiTextCausal
        }
    }

    pub fn lr(&self, c: Component) -> f64 {
        match c {
            Component::Vision => self.lr_vision,
            Component::Projector => self.lr_projector,
            Component::Language => self.lr_language,
        }
    }

    /// A component is trained exactly when its peak rate is nonzero.
    pub fn trainable(&self, c: Component) -> bool {
        self.lr(c) != 0.0
    }

    pub fn accumulation_steps(&self) -> usize {
        self.global_batch / self.micro_batch
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.stage > 3 {
            return fail(format!("stage must be 0..=3, got {}", self.stage));
        }
        if self.mask_kind != Self::stage_mask(self.stage) {
            return fail(format!("stage {} uses the {} mask, not {}", self.stage, Self::stage_mask(self.stage), self.mask_kind));
        }
        let expected_noise = if self.stage == 0 { 0.2 } else { 0.0 };
        if self.noise_rate != expected_noise {
            return fail(format!("stage {} noise_rate must be {expected_noise}", self.stage));
        }
        if self.stage == 0 && (self.lr_vision != 0.0 || self.lr_language != 0.0) {
            return fail("stage 0 trains only the projector".into());
        }
        let lrs = [self.lr_vision, self.lr_projector, self.lr_language, self.min_lr];
        if lrs.iter().any(|lr| !lr.is_finite() || *lr < 0.0) {
            return fail("learning rates must be finite and non-negative".into());
        }
        if Component::ALL.iter().all(|&c| !self.trainable(c)) {
            return fail("every component is frozen".into());
        }
        if self.micro_batch == 0 || self.global_batch == 0 || self.global_batch % self.micro_batch != 0 {
            return fail(format!(
                "global_batch {} must be a positive multiple of micro_batch {}",
                self.global_batch, self.micro_batch
            ));
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if !(self.clip_norm > 0.0) {
            return fail("clip_norm must be positive".into());
        }
        Ok(())
    }

    /// Optimizer steps for a dataset of `n` samples.
    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.global_batch)
    }
}
