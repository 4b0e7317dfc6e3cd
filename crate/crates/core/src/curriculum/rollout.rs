use rand::Rng;
use rayon::prelude::*;

use super::runlog::{RunLogWriter, StepRecord, TaskMix};
use super::{batch_task_source, mixed_task_source, TrainRunConfig};
use crate::cde::response_decision_entropy;
use crate::error::{Error, Result};
use crate::objectives::{group_advantages, grpo_loss_and_grad, optimizer_step, GroupRollout, OptimizerState};
use crate::policy::{mean_token_entropy, sample_response, PolicyParams, Snapshot, SnapshotId};
use crate::rewards::{total_reward, RewardBreakdown, RewardConfig};
use crate::rng;
use crate::scalar::Scalar;
use crate::task::{build_prompt, Example, PolicyManual, Split, TaskKind, TaskVocab};
use crate::vocab::TokenId;

/// Mutable GRPO state. `reference` is frozen at construction and its digest
/// is re-checked before every step.
pub struct TrainState<S> {
    pub step: usize,
    pub phase: u8,
    pub params: PolicyParams<S>,
    pub reference: Snapshot<S>,
    pub reference_id: SnapshotId,
    /// Id of the policy that sampled the most recent rollouts.
    pub old_id: Option<SnapshotId>,
    pub last: Option<StepRecord>,
    optimizer: OptimizerState<S>,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(params: PolicyParams<S>, reference: PolicyParams<S>, cfg: &TrainRunConfig) -> Result<Self> {
        let optimizer = OptimizerState::new(cfg.grpo_optimizer.clone(), &params)?;
        let reference = Snapshot::new(reference);
        let reference_id = reference.id();
        Ok(Self { step: 0, phase: 1, params, reference, reference_id, old_id: None, last: None, optimizer })
    }

    pub fn theta_id(&self) -> SnapshotId {
        self.params.digest()
    }

    fn check_reference(&self) -> Result<()> {
        let now = self.reference.params().digest();
        if now != self.reference_id || self.reference.id() != self.reference_id {
            return Err(Error::invalid(format!(
                "reference policy changed after warmup: {:016x} != {:016x}",
                now.0, self.reference_id.0
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrpoOutcome {
    pub records: Vec<StepRecord>,
}

struct PromptRollout {
    group: GroupRollout,
    rewards: Vec<RewardBreakdown>,
    entropies: Vec<Option<f64>>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Runs `cfg.curriculum.total_steps` GRPO steps from `state`. Each step samples
/// a group per prompt from `θ_old`, scores it, and applies one optimizer step.
/// `on_step` sees the state after every step.
pub fn run_grpo_phase<S: Scalar>(
    state: &mut TrainState<S>,
    corpus: &[Example],
    cfg: &TrainRunConfig,
    tv: &TaskVocab,
    mut log: Option<&mut RunLogWriter>,
    mut on_step: Option<&mut dyn FnMut(&TrainState<S>) -> Result<()>>,
) -> Result<GrpoOutcome> {
    cfg.validate()?;
    let pools: Vec<Vec<&Example>> = TaskKind::ALL
        .iter()
        .map(|&t| corpus.iter().filter(|e| e.split == Split::Train && e.task == t).collect())
        .collect();
    let reward_cfg =
        RewardConfig { accuracy: cfg.accuracy.clone(), cde: cfg.cde_reward.clone(), cde_enabled: cfg.cde_reward_enabled };
    let g = cfg.grpo.group_size;
    let mut records = Vec::with_capacity(cfg.curriculum.total_steps);

    for step in 0..cfg.curriculum.total_steps {
        state.check_reference()?;
        state.step = step;
        state.phase = cfg.curriculum.phase(step);

        let mut br = rng::stream(cfg.seed, "grpo-batch", &[step as u64]);
        let mut mix = TaskMix::default();
        let mut batch: Vec<(TaskKind, &Example)> = Vec::with_capacity(cfg.grpo_batch_prompts);
        for _ in 0..cfg.grpo_batch_prompts {
            let task =
                if cfg.curriculum_enabled { batch_task_source(step, &cfg.curriculum, &mut br)? } else { mixed_task_source(&mut br) };
            let pool = &pools[TaskKind::ALL.iter().position(|&t| t == task).expect("task in ALL")];
            if pool.is_empty() {
                return Err(Error::config(format!("no {} training examples", task.name())));
            }
            match task {
                TaskKind::Binary => mix.binary += 1,
                TaskKind::Attack => mix.attack += 1,
                TaskKind::Target => mix.target += 1,
            }
            batch.push((task, pool[br.random_range(0..pool.len())]));
        }

        let old = Snapshot::new(state.params.clone());
        state.old_id = Some(old.id());
        let rollouts: Vec<PromptRollout> = batch
            .par_iter()
            .enumerate()
            .map(|(i, &(task, ex))| {
                let x = build_prompt(ex, cfg.grpo_prompt_mode, &PolicyManual::standard(task, tv), tv)?;
                let mut r = rng::stream(cfg.seed, "grpo-rollout", &[step as u64, i as u64]);
                let mut responses = Vec::with_capacity(g);
                let mut rewards = Vec::with_capacity(g);
                let mut entropies = Vec::with_capacity(g);
                for _ in 0..g {
                    let y = sample_response(&old, &x, cfg.grpo.temperature, cfg.grpo.max_response_len, &mut r)?;
                    let h = response_decision_entropy(&old, &x, &y, task, tv, cfg.estimator.top_k);
                    rewards.push(total_reward(&y, task, &ex.gold_labels, h, &reward_cfg, tv)?);
                    entropies.push(h);
                    responses.push(y);
                }
                let totals: Vec<f64> = rewards.iter().map(|b| b.total).collect();
                let advantages = group_advantages(&totals, &cfg.grpo)?;
                Ok(PromptRollout {
                    group: GroupRollout { x, responses, rewards: totals, advantages, snapshot: old.id() },
                    rewards,
                    entropies,
                })
            })
            .collect::<Result<_>>()?;

        let pairs: Vec<(Vec<TokenId>, Vec<TokenId>)> =
            rollouts.iter().flat_map(|p| p.group.responses.iter().map(|y| (p.group.x.clone(), y.clone()))).collect();
        let policy_entropy = mean_token_entropy(&old, &pairs)?.as_f64();
        let groups: Vec<GroupRollout> = rollouts.iter().map(|p| p.group.clone()).collect();
        let (_, grad) = grpo_loss_and_grad(&old, &old, &state.reference, &groups, &cfg.grpo)?;
        optimizer_step(&mut state.params, &grad, &mut state.optimizer)?;

        let all: Vec<&RewardBreakdown> = rollouts.iter().flat_map(|p| &p.rewards).collect();
        let hs: Vec<f64> = rollouts.iter().flat_map(|p| p.entropies.iter().flatten().copied()).collect();
        let record = StepRecord {
            step,
            phase: state.phase,
            task_mix: mix,
            mean_total_reward: mean(all.iter().map(|b| b.total)),
            mean_r_format: mean(all.iter().map(|b| b.r_format)),
            mean_r_acc: mean(all.iter().map(|b| b.r_acc)),
            mean_r_cde: mean(all.iter().map(|b| b.r_cde)),
            policy_entropy,
            mean_response_len: mean(pairs.iter().map(|(_, y)| y.len() as f64)),
            mean_cde: (!hs.is_empty()).then(|| mean(hs.iter().copied())),
        };
        if let Some(w) = log.as_deref_mut() {
            w.append(&record)?;
        }
        state.last = Some(record.clone());
        records.push(record);
        if let Some(f) = on_step.as_deref_mut() {
            f(state)?;
        }
    }
    state.check_reference()?;
    Ok(GrpoOutcome { records })
}
