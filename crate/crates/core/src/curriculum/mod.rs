//! Training orchestration: supervised warmup, then GRPO under a two-phase
//! task schedule, with per-step JSON-lines logging.

mod pipeline;
mod runlog;
mod rollout;
mod warmup;

pub use pipeline::{
    expo_hm_pipeline, run_dpo_phase, run_grid, DpoOutcome, GridReport, GridRow, GridRowSummary, PipelineConfig,
    PipelineOutput, TrainMethod, GRID_ROWS,
};
pub use rollout::{run_grpo_phase, GrpoOutcome, TrainState};
pub use runlog::{entropy_ratio, read_run_log, EntropyRatio, RunLogWriter, StepRecord, TaskMix};
pub use warmup::{run_warmup, warmup_items, WarmupEpoch, WarmupItem, WarmupMode, WarmupOutcome};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{DpoConfig, GrpoConfig, OptimizerConfig};
use crate::rewards::{AccuracyConfig, CdeRewardConfig};
use crate::cde::EstimatorConfig;
use crate::task::{PromptMode, TaskKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurriculumConfig {
    /// Fraction of steps that draw fine-grained tasks only.
    pub phase_split: f64,
    /// Probability of a fine-grained draw after the split.
    pub phase2_finegrained_ratio: f64,
    pub total_steps: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self { phase_split: 0.5, phase2_finegrained_ratio: 0.5, total_steps: 300 }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.phase_split > 0.0 && self.phase_split < 1.0) {
            return Err(Error::config(format!("phase_split {} outside (0, 1)", self.phase_split)));
        }
        if !(0.0..=1.0).contains(&self.phase2_finegrained_ratio) {
            return Err(Error::config(format!(
                "phase2_finegrained_ratio {} outside [0, 1]",
                self.phase2_finegrained_ratio
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::config("total_steps must be positive"));
        }
        Ok(())
    }

    /// 1 before the split, 2 after.
    pub fn phase(&self, step: usize) -> u8 {
        if (step as f64) < self.phase_split * self.total_steps as f64 {
            1
        } else {
            2
        }
    }
}

/// Task pool for one batch element at `step`. Fine-grained draws are split
/// evenly between attack and target.
pub fn batch_task_source<R: Rng + ?Sized>(step: usize, cfg: &CurriculumConfig, rng: &mut R) -> Result<TaskKind> {
    if step >= cfg.total_steps {
        return Err(Error::invalid(format!("step {step} outside schedule of {} steps", cfg.total_steps)));
    }
    let fine = cfg.phase(step) == 1 || rng.random::<f64>() < cfg.phase2_finegrained_ratio;
    Ok(pick(fine, rng))
}

/// Schedule used with the curriculum switched off: a fair coin between the
/// fine-grained and binary pools at every step.
pub fn mixed_task_source<R: Rng + ?Sized>(rng: &mut R) -> TaskKind {
    let fine = rng.random::<f64>() < 0.5;
    pick(fine, rng)
}

fn pick<R: Rng + ?Sized>(fine: bool, rng: &mut R) -> TaskKind {
    if !fine {
        TaskKind::Binary
    } else if rng.random::<bool>() {
        TaskKind::Attack
    } else {
        TaskKind::Target
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRunConfig {
    pub warmup_mode: WarmupMode,
    pub warmup_epochs: usize,
    pub warmup_batch_size: usize,
    pub warmup_optimizer: OptimizerConfig,
    pub cde_reward_enabled: bool,
    pub curriculum_enabled: bool,
    pub curriculum: CurriculumConfig,
    pub grpo: GrpoConfig,
    /// Prompts per GRPO step; each gets `group_size` responses.
    pub grpo_batch_prompts: usize,
    pub grpo_optimizer: OptimizerConfig,
    pub grpo_prompt_mode: PromptMode,
    pub cde_reward: CdeRewardConfig,
    pub accuracy: AccuracyConfig,
    pub estimator: EstimatorConfig,
    pub dpo: DpoConfig,
    pub dpo_epochs: usize,
    pub dpo_batch_size: usize,
    pub seed: u64,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            warmup_mode: WarmupMode::SftPm,
            warmup_epochs: 3,
            warmup_batch_size: 16,
            warmup_optimizer: OptimizerConfig { lr: 1e-2, ..OptimizerConfig::default() },
            cde_reward_enabled: true,
            curriculum_enabled: true,
            curriculum: CurriculumConfig::default(),
            grpo: GrpoConfig::default(),
            grpo_batch_prompts: 16,
            grpo_optimizer: OptimizerConfig::default(),
            grpo_prompt_mode: PromptMode::Plain,
            cde_reward: CdeRewardConfig::default(),
            accuracy: AccuracyConfig::default(),
            estimator: EstimatorConfig::default(),
            dpo: DpoConfig::default(),
            dpo_epochs: 1,
            dpo_batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs == 0 || self.warmup_batch_size == 0 {
            return Err(Error::config("warmup_epochs and warmup_batch_size must be positive"));
        }
        if self.grpo_batch_prompts == 0 {
            return Err(Error::config("grpo_batch_prompts must be positive"));
        }
        if self.dpo_epochs == 0 || self.dpo_batch_size == 0 {
            return Err(Error::config("dpo_epochs and dpo_batch_size must be positive"));
        }
        self.warmup_optimizer.validate()?;
        self.grpo_optimizer.validate()?;
        self.curriculum.validate()?;
        self.grpo.validate()?;
        self.cde_reward.validate()?;
        self.accuracy.validate()?;
        self.estimator.validate()?;
        self.dpo.validate()
    }
}
