use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::TrainRunConfig;
use crate::error::{Error, Result};
use crate::eval::macro_f1;
use crate::objectives::{optimizer_step, sft_loss_and_grad, OptimizerState, SftBatch};
use crate::policy::{sample_response, PolicyParams, Snapshot};
use crate::rng;
use crate::scalar::Scalar;
use crate::task::{build_prompt, parse_response, render_target, Example, PolicyManual, PromptMode, Split, TaskKind, TaskVocab};
use crate::vocab::TokenId;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmupMode {
    None,
    /// Binary task, answer-only targets.
    SftB,
    /// Fine-grained tasks, gold explanation inside the think block.
    SftR,
    /// Fine-grained tasks, plain prompts, answer-only targets.
    SftFg,
    /// Fine-grained tasks, policy-manual prompts, answer-only targets.
    #[default]
    SftPm,
}

impl WarmupMode {
    pub const ALL: [WarmupMode; 5] = [Self::None, Self::SftB, Self::SftR, Self::SftFg, Self::SftPm];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::SftB => "sft_b",
            Self::SftR => "sft_r",
            Self::SftFg => "sft_fg",
            Self::SftPm => "sft_pm",
        }
    }

    fn tasks(self) -> &'static [TaskKind] {
        match self {
            Self::None => &[],
            Self::SftB => &[TaskKind::Binary],
            _ => &[TaskKind::Attack, TaskKind::Target],
        }
    }

    fn prompt_mode(self) -> PromptMode {
        if self == Self::SftPm {
            PromptMode::PolicyManual
        } else {
            PromptMode::Plain
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WarmupItem {
    pub id: u64,
    pub task: TaskKind,
    pub x: Vec<TokenId>,
    pub y: Vec<TokenId>,
    pub gold: Vec<TokenId>,
}

/// Supervised `(x, y*)` pairs for `mode` drawn from one split.
pub fn warmup_items(mode: WarmupMode, corpus: &[Example], split: Split, tv: &TaskVocab) -> Result<Vec<WarmupItem>> {
    let pm = mode.prompt_mode();
    corpus
        .iter()
        .filter(|e| e.split == split && mode.tasks().contains(&e.task))
        .map(|e| {
            let explanation: &[TokenId] = if mode == WarmupMode::SftR {
                if e.gold_explanation.is_empty() {
                    return Err(Error::config(format!("sft_r warmup needs a gold explanation for example {}", e.id)));
                }
                &e.gold_explanation
            } else {
                &[]
            };
            Ok(WarmupItem {
                id: e.id,
                task: e.task,
                x: build_prompt(e, pm, &PolicyManual::standard(e.task, tv), tv)?,
                y: render_target(explanation, &e.gold_labels, e.task, tv)?,
                gold: e.gold_labels.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupEpoch {
    pub epoch: usize,
    /// Mean minibatch loss over the epoch.
    pub train_loss: f64,
    /// Mean macro-F1 over the warmup tasks, greedy decoding on validation.
    pub val_f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarmupOutcome<S> {
    /// Parameters from the best validation epoch; these become `θ_ref`.
    pub params: PolicyParams<S>,
    pub epochs: Vec<WarmupEpoch>,
    pub best_epoch: Option<usize>,
}

fn greedy_f1<S: Scalar>(snap: &Snapshot<S>, items: &[WarmupItem], max_len: usize, tv: &TaskVocab) -> Result<f64> {
    let preds: Vec<Vec<TokenId>> = items
        .par_iter()
        .map(|it| {
            let mut r = rng::stream(0, "greedy", &[]);
            let y = sample_response(snap, &it.x, 0.0, max_len, &mut r)?;
            Ok(parse_response(&y, it.task, tv).map(|p| p.labels).unwrap_or_default())
        })
        .collect::<Result<_>>()?;
    let mut scores = Vec::new();
    for task in TaskKind::ALL {
        let (p, g): (Vec<Vec<TokenId>>, Vec<Vec<TokenId>>) = items
            .iter()
            .zip(&preds)
            .filter(|(it, _)| it.task == task)
            .map(|(it, p)| (p.clone(), it.gold.clone()))
            .unzip();
        if !p.is_empty() {
            scores.push(macro_f1(&p, &g, &tv.answer_labels(task))?);
        }
    }
    Ok(if scores.is_empty() { 0.0 } else { scores.iter().sum::<f64>() / scores.len() as f64 })
}

/// Supervised warmup for `cfg.warmup_epochs`, keeping the epoch with the best
/// validation F1 (earliest on ties). Mode `none` returns `params` unchanged.
pub fn run_warmup<S: Scalar>(
    params: PolicyParams<S>,
    corpus: &[Example],
    cfg: &TrainRunConfig,
    tv: &TaskVocab,
) -> Result<WarmupOutcome<S>> {
    cfg.validate()?;
    let mode = cfg.warmup_mode;
    if mode == WarmupMode::None {
        return Ok(WarmupOutcome { params, epochs: Vec::new(), best_epoch: None });
    }
    let train = warmup_items(mode, corpus, Split::Train, tv)?;
    let val = warmup_items(mode, corpus, Split::Validation, tv)?;
    if train.is_empty() {
        return Err(Error::config(format!("corpus has no training examples for {} warmup", mode.name())));
    }
    let max_len = cfg.grpo.max_response_len;
    let mut params = params;
    let mut opt = OptimizerState::new(cfg.warmup_optimizer.clone(), &params)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.warmup_epochs);
    let mut best: Option<(f64, usize, PolicyParams<S>)> = None;
    for epoch in 0..cfg.warmup_epochs {
        order.shuffle(&mut rng::stream(cfg.seed, "warmup-shuffle", &[epoch as u64]));
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.warmup_batch_size) {
            let batch = SftBatch::new(chunk.iter().map(|&i| (train[i].x.clone(), train[i].y.clone())).collect());
            let snap = Snapshot::new(params.clone());
            let (loss, grad) = sft_loss_and_grad(&snap, &batch)?;
            optimizer_step(&mut params, &grad, &mut opt)?;
            total += loss.as_f64();
            batches += 1;
        }
        let val_f1 = if val.is_empty() { 0.0 } else { greedy_f1(&Snapshot::new(params.clone()), &val, max_len, tv)? };
        epochs.push(WarmupEpoch { epoch, train_loss: total / batches as f64, val_f1 });
        if best.as_ref().is_none_or(|(f, _, _)| val_f1 > *f) {
            best = Some((val_f1, epoch, params.clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    Ok(WarmupOutcome { params, epochs, best_epoch: Some(best_epoch) })
}
