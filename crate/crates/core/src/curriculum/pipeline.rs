use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::rollout::{run_grpo_phase, TrainState};
use super::runlog::{entropy_ratio, EntropyRatio, RunLogWriter, StepRecord};
use super::warmup::{run_warmup, WarmupEpoch, WarmupMode};
use super::TrainRunConfig;
use crate::error::{Error, Result};
use crate::eval::{emit_report, evaluate, pearson, spearman, CorrelationResult, EvalConfig, EvalReport};
use crate::objectives::{
    dpo_loss_and_grad, optimizer_step, sample_preference_pairs, DpoItem, OptimizerState, PairStats,
};
use crate::policy::{save_checkpoint, PolicyConfig, PolicyParams, Snapshot};
use crate::rng;
use crate::task::{build_prompt, Example, PolicyManual, PromptMode, Split, TaskVocab};
use crate::Params;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMethod {
    /// Warmup only.
    Sft,
    /// Warmup, then preference optimization against the warmed policy.
    Dpo,
    /// Warmup, then GRPO without the entropy reward.
    Grpo,
    /// Warmup, then GRPO exactly as configured.
    #[default]
    Expo,
}

impl TrainMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sft => "sft",
            Self::Dpo => "dpo",
            Self::Grpo => "grpo",
            Self::Expo => "expo",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub method: TrainMethod,
    pub policy: PolicyConfig,
    pub train: TrainRunConfig,
    pub eval: EvalConfig,
    /// GRPO step counts after which an extra evaluation runs; 0 means right
    /// after warmup.
    pub eval_steps: Vec<usize>,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        self.train.validate()?;
        self.eval.estimator.validate()?;
        if let Some(&s) = self.eval_steps.iter().find(|&&s| s > self.train.curriculum.total_steps) {
            return Err(Error::config(format!(
                "eval step {s} beyond {} GRPO steps",
                self.train.curriculum.total_steps
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpoOutcome {
    pub losses: Vec<f64>,
    pub stats: PairStats,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub warmup_epochs: Vec<WarmupEpoch>,
    pub best_warmup_epoch: Option<usize>,
    pub params: Params,
    pub run_log: Vec<StepRecord>,
    pub dpo: Option<DpoOutcome>,
    pub report: EvalReport,
    /// Extra evaluations keyed by GRPO step.
    pub intermediate: Vec<(usize, EvalReport)>,
    /// Files written, in creation order.
    pub artifacts: Vec<PathBuf>,
}

/// Preference optimization of `params` against the frozen `reference`, with
/// pairs sampled once from the reference on every training prompt.
pub fn run_dpo_phase(
    params: &mut Params,
    reference: &Snapshot<f64>,
    corpus: &[Example],
    cfg: &TrainRunConfig,
    tv: &TaskVocab,
) -> Result<DpoOutcome> {
    let items: Vec<DpoItem> = corpus
        .iter()
        .filter(|e| e.split == Split::Train)
        .map(|e| {
            Ok(DpoItem {
                id: e.id,
                x: build_prompt(e, PromptMode::Plain, &PolicyManual::standard(e.task, tv), tv)?,
                task: e.task,
                gold: e.gold_labels.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let (pairs, stats) =
        sample_preference_pairs(reference, &items, &cfg.dpo, tv, &mut rng::stream(cfg.seed, "dpo-pairs", &[]))?;
    let mut losses = Vec::new();
    if pairs.is_empty() {
        return Ok(DpoOutcome { losses, stats });
    }
    let mut opt = OptimizerState::new(cfg.grpo_optimizer.clone(), params)?;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..cfg.dpo_epochs {
        order.shuffle(&mut rng::stream(cfg.seed, "dpo-shuffle", &[epoch as u64]));
        for chunk in order.chunks(cfg.dpo_batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            let snap = Snapshot::new(params.clone());
            let (loss, grad) = dpo_loss_and_grad(&snap, &batch, &cfg.dpo)?;
            optimizer_step(params, &grad, &mut opt)?;
            losses.push(loss);
        }
    }
    Ok(DpoOutcome { losses, stats })
}

fn eval_seed(cfg: &PipelineConfig) -> u64 {
    rng::derive_seed(cfg.train.seed, "eval", &[])
}

/// Warmup, then the configured post-training method, then evaluation. When
/// `out` is given every artifact is written beneath it.
pub fn expo_hm_pipeline(cfg: &PipelineConfig, corpus: &[Example], tv: &TaskVocab, out: Option<&Path>) -> Result<PipelineOutput> {
    cfg.validate()?;
    let mut train = cfg.train.clone();
    if cfg.method == TrainMethod::Grpo {
        train.cde_reward_enabled = false;
    }
    let mut artifacts = Vec::new();
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let seed = eval_seed(cfg);
    let evaluate_at = |params: &Params| evaluate(&Snapshot::new(params.clone()), corpus, &cfg.eval, tv, seed);

    let init = PolicyParams::<f64>::for_vocab(cfg.policy.clone(), tv.vocab())?;
    let warm = run_warmup(init, corpus, &train, tv)?;
    if let Some(dir) = out {
        let p = dir.join("warmup.json");
        fs::write(&p, serde_json::to_string_pretty(&warm.epochs)? + "\n").map_err(|e| Error::io(&p, e))?;
        artifacts.push(p);
        let p = dir.join("checkpoint_warmup.bin");
        save_checkpoint(&warm.params, tv.vocab(), 0, &p)?;
        artifacts.push(p);
    }

    let mut intermediate = Vec::new();
    let mut run_log = Vec::new();
    let mut dpo = None;
    let mut params = warm.params.clone();
    let mut step_count = 0u64;
    match cfg.method {
        TrainMethod::Sft => {}
        TrainMethod::Dpo => {
            let reference = Snapshot::new(warm.params.clone());
            let outcome = run_dpo_phase(&mut params, &reference, corpus, &train, tv)?;
            step_count = outcome.losses.len() as u64;
            if let Some(dir) = out {
                let p = dir.join("dpo_log.json");
                fs::write(&p, serde_json::to_string_pretty(&outcome)? + "\n").map_err(|e| Error::io(&p, e))?;
                artifacts.push(p);
            }
            dpo = Some(outcome);
        }
        TrainMethod::Grpo | TrainMethod::Expo => {
            if cfg.eval_steps.contains(&0) {
                intermediate.push((0, evaluate_at(&warm.params)?));
            }
            let mut state = TrainState::new(warm.params.clone(), warm.params.clone(), &train)?;
            let mut writer = match out {
                Some(dir) => {
                    let p = dir.join("run_log.jsonl");
                    let w = RunLogWriter::create(&p)?;
                    artifacts.push(p);
                    Some(w)
                }
                None => None,
            };
            let mut hook = |s: &TrainState<f64>| -> Result<()> {
                let done = s.step + 1;
                if cfg.eval_steps.contains(&done) {
                    intermediate.push((done, evaluate_at(&s.params)?));
                }
                Ok(())
            };
            let outcome = run_grpo_phase(&mut state, corpus, &train, tv, writer.as_mut(), Some(&mut hook))?;
            run_log = outcome.records;
            step_count = run_log.len() as u64;
            params = state.params;
        }
    }

    let report = evaluate_at(&params)?;
    if let Some(dir) = out {
        let p = dir.join("checkpoint_final.bin");
        save_checkpoint(&params, tv.vocab(), step_count, &p)?;
        artifacts.push(p);
        artifacts.extend(emit_report(&report, &dir.join("eval"))?);
        for (step, r) in &intermediate {
            artifacts.extend(emit_report(r, &dir.join(format!("eval_step{step}")))?);
        }
    }
    Ok(PipelineOutput {
        warmup_epochs: warm.epochs,
        best_warmup_epoch: warm.best_epoch,
        params,
        run_log,
        dpo,
        report,
        intermediate,
        artifacts,
    })
}

/// Table-row analogues: name, warmup, curriculum, entropy reward.
pub const GRID_ROWS: [(&str, WarmupMode, bool, bool); 4] = [
    ("grpo", WarmupMode::None, false, false),
    ("sft_pm_grpo", WarmupMode::SftPm, false, false),
    ("sft_pm_grpo_cl", WarmupMode::SftPm, true, false),
    ("expo_hm", WarmupMode::SftPm, true, true),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub fine_grained_f1: f64,
    pub mean_cde: f64,
    pub mean_judge: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub row: String,
    pub seed: u64,
    pub fine_grained_f1: f64,
    pub mean_cde: f64,
    pub mean_judge: f64,
    pub mean_policy_entropy: f64,
    /// Intermediate evaluations followed by the final one.
    pub evals: Vec<EvalPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRowSummary {
    pub row: String,
    pub seeds: usize,
    pub fine_grained_f1: f64,
    pub mean_cde: f64,
    pub mean_judge: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub runs: Vec<GridRow>,
    pub summary: Vec<GridRowSummary>,
    /// Policy entropy of the full configuration over plain GRPO, pooled over seeds.
    pub entropy_ratio: Option<EntropyRatio>,
    /// Correlation of mean CDE with mean judge score over every evaluation point.
    pub pearson: Option<CorrelationResult>,
    pub spearman: Option<CorrelationResult>,
    pub correlation_points: usize,
}

fn point(step: usize, r: &EvalReport) -> EvalPoint {
    EvalPoint { step, fine_grained_f1: r.fine_grained_f1, mean_cde: r.cde(), mean_judge: r.mean_judge }
}

/// Runs every row of [`GRID_ROWS`] for every seed on a shared corpus.
pub fn run_grid(base: &PipelineConfig, seeds: &[u64], corpus: &[Example], tv: &TaskVocab, out: Option<&Path>) -> Result<GridReport> {
    if seeds.is_empty() {
        return Err(Error::config("grid needs at least one seed"));
    }
    let mut runs = Vec::new();
    let mut logs: Vec<(String, Vec<StepRecord>)> = Vec::new();
    for (name, warmup, curriculum, cde) in GRID_ROWS {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.method = TrainMethod::Expo;
            cfg.train.warmup_mode = warmup;
            cfg.train.curriculum_enabled = curriculum;
            cfg.train.cde_reward_enabled = cde;
            cfg.train.seed = seed;
            cfg.policy.seed = rng::derive_seed(seed, "policy-init", &[]);
            let dir = out.map(|d| d.join(name).join(format!("seed{seed}")));
            let o = expo_hm_pipeline(&cfg, corpus, tv, dir.as_deref())?;
            let mut evals: Vec<EvalPoint> = o.intermediate.iter().map(|(s, r)| point(*s, r)).collect();
            evals.push(point(cfg.train.curriculum.total_steps, &o.report));
            let ent = if o.run_log.is_empty() {
                0.0
            } else {
                o.run_log.iter().map(|r| r.policy_entropy).sum::<f64>() / o.run_log.len() as f64
            };
            runs.push(GridRow {
                row: name.to_string(),
                seed,
                fine_grained_f1: o.report.fine_grained_f1,
                mean_cde: o.report.cde(),
                mean_judge: o.report.mean_judge,
                mean_policy_entropy: ent,
                evals,
            });
            logs.push((name.to_string(), o.run_log));
        }
    }
    let summary = GRID_ROWS
        .iter()
        .map(|(name, ..)| {
            let rows: Vec<&GridRow> = runs.iter().filter(|r| r.row == *name).collect();
            let n = rows.len() as f64;
            GridRowSummary {
                row: name.to_string(),
                seeds: rows.len(),
                fine_grained_f1: rows.iter().map(|r| r.fine_grained_f1).sum::<f64>() / n,
                mean_cde: rows.iter().map(|r| r.mean_cde).sum::<f64>() / n,
                mean_judge: rows.iter().map(|r| r.mean_judge).sum::<f64>() / n,
            }
        })
        .collect();
    let pooled = |row: &str| -> Vec<StepRecord> {
        logs.iter().filter(|(n, _)| n == row).flat_map(|(_, l)| l.iter().cloned()).collect()
    };
    let entropy_ratio = entropy_ratio(&pooled("expo_hm"), &pooled("grpo")).ok();
    let (xs, ys): (Vec<f64>, Vec<f64>) =
        runs.iter().flat_map(|r| r.evals.iter().map(|p| (p.mean_cde, p.mean_judge))).unzip();
    let report = GridReport {
        pearson: pearson(&xs, &ys).ok(),
        spearman: spearman(&xs, &ys).ok(),
        correlation_points: xs.len(),
        runs,
        summary,
        entropy_ratio,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("grid_report.json");
        fs::write(&p, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(&p, e))?;
        let mut s = String::from("row,seeds,fine_grained_f1,mean_cde,mean_judge\n");
        for r in &report.summary {
            let _ = writeln!(s, "{},{},{},{},{}", r.row, r.seeds, r.fine_grained_f1, r.mean_cde, r.mean_judge);
        }
        let p = dir.join("grid_table.csv");
        fs::write(&p, s).map_err(|e| Error::io(&p, e))?;
    }
    Ok(report)
}
