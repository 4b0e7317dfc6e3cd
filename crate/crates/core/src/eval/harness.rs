use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::judge::{oracle_judge_score, JudgeClient, JudgeConfig, JudgeRequest};
use super::metrics::{cde_by_correctness, macro_f1, CorrectnessSplit};
use crate::cde::{
    chain_rule_cde, collapse_binary, dataset_cde, sample_explanation, CdeEstimate, CdeItem, DecisionCollapseMap,
    DecisionProbe, EstimatorConfig, EstimatorMethod,
};
use crate::error::{Error, Result};
use crate::policy::{decision_distribution, sample_response, Snapshot};
use crate::rng;
use crate::scalar::{entropy, Scalar};
use crate::task::{build_prompt, parse_response, Example, PolicyManual, PromptMode, Split, TaskKind, TaskVocab};
use crate::vocab::TokenId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub split: Split,
    pub temperature: f64,
    pub max_response_len: usize,
    pub prompt_mode: PromptMode,
    pub estimator: EstimatorConfig,
    /// Also run the chain-rule estimator on the fine-grained examples.
    pub chain_rule: bool,
    /// Use at most this many latent memes (three examples each).
    pub max_examples: Option<usize>,
    pub use_external_judge: bool,
    /// Supplied by the caller; not part of the serialized evaluation options.
    #[serde(skip)]
    pub judge: JudgeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Validation,
            temperature: 1.0,
            max_response_len: 24,
            prompt_mode: PromptMode::Plain,
            estimator: EstimatorConfig::default(),
            chain_rule: false,
            max_examples: None,
            use_external_judge: false,
            judge: JudgeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: u64,
    pub task: TaskKind,
    pub gold: Vec<String>,
    /// Empty when the response does not parse.
    pub pred: Vec<String>,
    pub parsed: bool,
    pub correct: bool,
    /// Mean decision entropy over the sampled explanations for this example.
    pub cde: f64,
    pub judge: u8,
    pub response_len: usize,
    pub response: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdeSummary {
    #[serde(rename = "K")]
    pub k: usize,
    pub top_k: usize,
    pub fine_grained: f64,
    pub binary: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub per_task_f1: BTreeMap<String, f64>,
    /// Mean of the attack and target macro-F1.
    pub fine_grained_f1: f64,
    pub mean_cde: BTreeMap<String, CdeSummary>,
    /// Binary-task CDE after collapsing the decision to Yes/No.
    pub binary_collapsed_cde: Option<f64>,
    /// Fine-grained examples only.
    pub cde_by_correctness: CorrectnessSplit,
    pub mean_judge: f64,
    pub judge_source: String,
    pub format_rate: f64,
    pub mean_response_len: f64,
    pub records: Vec<ExampleRecord>,
}

impl EvalReport {
    /// Mean CDE over fine-grained examples from the Monte-Carlo estimator.
    pub fn cde(&self) -> f64 {
        self.mean_cde.get(EstimatorMethod::McDataset.name()).map(|s| s.fine_grained).unwrap_or(f64::NAN)
    }
}

/// Explanation used for judging: the think segment when one can be located,
/// otherwise the whole response.
fn reasoning_of(response: &[TokenId], tv: &TaskVocab) -> Vec<TokenId> {
    let sp = tv.vocab().specials();
    let open = response.iter().position(|&t| t == sp.think_open);
    let close = response.iter().position(|&t| t == sp.think_close);
    match (open, close) {
        (Some(a), Some(b)) if a < b => response[a + 1..b].to_vec(),
        (Some(a), None) => response[a + 1..].iter().copied().filter(|&t| t != sp.eos).collect(),
        _ => response.iter().copied().filter(|&t| t != sp.eos).collect(),
    }
}

/// Prompts for every example of `split` under `mode`, in corpus order.
pub fn eval_examples<'a>(corpus: &'a [Example], cfg: &EvalConfig) -> Vec<&'a Example> {
    let limit = cfg.max_examples.map(|m| 3 * m).unwrap_or(usize::MAX);
    corpus.iter().filter(|e| e.split == cfg.split).take(limit).collect()
}

/// Samples one response per example, scores it, and estimates CDE per example.
pub fn evaluate<S: Scalar>(snap: &Snapshot<S>, corpus: &[Example], cfg: &EvalConfig, tv: &TaskVocab, seed: u64) -> Result<EvalReport> {
    cfg.estimator.validate()?;
    let examples = eval_examples(corpus, cfg);
    if examples.is_empty() {
        return Err(Error::invalid(format!("no {:?} examples to evaluate", cfg.split)));
    }
    let manuals: BTreeMap<TaskKind, PolicyManual> = TaskKind::ALL.iter().map(|&t| (t, PolicyManual::standard(t, tv))).collect();
    let prompts: Vec<Vec<TokenId>> =
        examples.iter().map(|e| build_prompt(e, cfg.prompt_mode, &manuals[&e.task], tv)).collect::<Result<_>>()?;
    let v = tv.vocab();

    let responses: Vec<Vec<TokenId>> = examples
        .par_iter()
        .zip(&prompts)
        .map(|(e, x)| {
            let mut r = rng::stream(seed, "eval-response", &[e.id]);
            sample_response(snap, x, cfg.temperature, cfg.max_response_len, &mut r)
        })
        .collect::<Result<_>>()?;

    let probe = DecisionProbe::template(tv, cfg.max_response_len.saturating_sub(5).max(1));
    let items: Vec<CdeItem> = examples.iter().zip(&prompts).map(|(e, x)| CdeItem { id: e.id, x: x.clone() }).collect();
    let mut r = rng::stream(seed, "eval-cde", &[]);
    let mc = dataset_cde(snap, &items, &probe, &cfg.estimator, &mut r)?;

    let judge_scores: Vec<u8> = if cfg.use_external_judge {
        let client = JudgeClient::new(cfg.judge.clone())?;
        let reqs: Vec<JudgeRequest> = examples
            .iter()
            .zip(&responses)
            .map(|(e, y)| JudgeRequest {
                reference: v.render(&e.gold_explanation),
                model: v.render(&reasoning_of(y, tv)),
                prediction: parse_response(y, e.task, tv).map(|p| v.render(&p.labels)).unwrap_or_default(),
            })
            .collect();
        client.judge_all(&reqs).into_iter().map(|r| r.map(|j| j.score)).collect::<Result<_, _>>()?
    } else {
        examples
            .iter()
            .zip(&responses)
            .map(|(e, y)| oracle_judge_score(&reasoning_of(y, tv), &e.gold_explanation, tv))
            .collect()
    };

    let mut records = Vec::with_capacity(examples.len());
    for (i, (e, y)) in examples.iter().zip(&responses).enumerate() {
        let parsed = parse_response(y, e.task, tv).ok();
        let pred = parsed.as_ref().map(|p| p.labels.clone()).unwrap_or_default();
        let correct = parsed.is_some() && pred == e.gold_labels;
        records.push(ExampleRecord {
            id: e.id,
            task: e.task,
            gold: v.decode(&e.gold_labels),
            pred: v.decode(&pred),
            parsed: parsed.is_some(),
            correct,
            cde: mc.example_mean(e.id).unwrap_or(0.0),
            judge: judge_scores[i],
            response_len: y.len(),
            response: v.render(y),
        });
    }

    let mut per_task_f1 = BTreeMap::new();
    for task in TaskKind::ALL {
        let (preds, golds): (Vec<Vec<TokenId>>, Vec<Vec<TokenId>>) = examples
            .iter()
            .zip(&records)
            .filter(|(e, _)| e.task == task)
            .map(|(e, rec)| (v.encode(&rec.pred).expect("decoded labels re-encode"), e.gold_labels.clone()))
            .unzip();
        if !preds.is_empty() {
            per_task_f1.insert(task.name().to_string(), macro_f1(&preds, &golds, &tv.answer_labels(task))?);
        }
    }
    let fg: Vec<f64> = ["attack", "target"].iter().filter_map(|k| per_task_f1.get(*k).copied()).collect();
    let fine_grained_f1 = if fg.is_empty() { 0.0 } else { fg.iter().sum::<f64>() / fg.len() as f64 };

    let mean_over = |est: &CdeEstimate, fine: bool| -> Option<f64> {
        let vals: Vec<f64> = records
            .iter()
            .filter(|r| r.task.is_fine_grained() == fine)
            .filter_map(|r| est.per_example.iter().find(|p| p.id == r.id))
            .flat_map(|p| p.entropies.iter().copied())
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let mut mean_cde = BTreeMap::new();
    mean_cde.insert(
        EstimatorMethod::McDataset.name().to_string(),
        CdeSummary {
            k: mc.k,
            top_k: mc.top_k,
            fine_grained: mean_over(&mc, true).unwrap_or(0.0),
            binary: mean_over(&mc, false),
        },
    );
    if cfg.chain_rule {
        let fine_items: Vec<CdeItem> = items
            .iter()
            .zip(&examples)
            .filter(|(_, e)| e.task.is_fine_grained())
            .map(|(i, _)| i.clone())
            .collect();
        if !fine_items.is_empty() {
            let mut r = rng::stream(seed, "eval-cde-chain", &[]);
            let est = chain_rule_cde(snap, &fine_items, &probe, &cfg.estimator, &mut r)?;
            mean_cde.insert(
                EstimatorMethod::ChainRule.name().to_string(),
                CdeSummary { k: est.k, top_k: est.top_k, fine_grained: est.mean, binary: None },
            );
        }
    }

    let binary_collapsed_cde = {
        let map = DecisionCollapseMap::standard(tv);
        let vals: Vec<f64> = items
            .par_iter()
            .zip(&examples)
            .filter(|(_, e)| e.task == TaskKind::Binary)
            .map(|(item, _)| {
                let mut r = rng::stream(seed, "eval-cde-collapsed", &[item.id]);
                let mut out = Vec::with_capacity(cfg.estimator.k);
                for _ in 0..cfg.estimator.k {
                    let (e, _) = sample_explanation(snap, &item.x, &probe, cfg.estimator.temperature, &mut r)?;
                    let d = decision_distribution(snap, &probe.decision_context(&item.x, &e), v.len());
                    out.push(match collapse_binary(&d, &map) {
                        Ok(c) => entropy(&c.probs).as_f64(),
                        Err(_) => 2f64.ln(),
                    });
                }
                Ok(out)
            })
            .collect::<Result<Vec<Vec<f64>>>>()?
            .into_iter()
            .flatten()
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };

    let fine: Vec<(f64, bool)> = records.iter().filter(|r| r.task.is_fine_grained()).map(|r| (r.cde, r.correct)).collect();
    let n = records.len() as f64;
    Ok(EvalReport {
        split: cfg.split,
        per_task_f1,
        fine_grained_f1,
        mean_cde,
        binary_collapsed_cde,
        cde_by_correctness: cde_by_correctness(&fine),
        mean_judge: records.iter().map(|r| r.judge as f64).sum::<f64>() / n,
        judge_source: if cfg.use_external_judge { "external".into() } else { "oracle".into() },
        format_rate: records.iter().filter(|r| r.parsed).count() as f64 / n,
        mean_response_len: records.iter().map(|r| r.response_len as f64).sum::<f64>() / n,
        records,
    })
}

fn write(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).map_err(|e| Error::io(path, e))
}

/// Writes `report.json` plus CSV plot data into `dir`; returns the written paths.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    let mut out = |name: &str, content: String| -> Result<()> {
        let p = dir.join(name);
        write(&p, &content)?;
        paths.push(p);
        Ok(())
    };
    out("report.json", serde_json::to_string_pretty(report)? + "\n")?;

    let mut s = String::from("id,task,gold,pred,parsed,correct,cde,judge,response_len\n");
    for r in &report.records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.id,
            r.task.name(),
            r.gold.join("|"),
            r.pred.join("|"),
            r.parsed,
            r.correct,
            r.cde,
            r.judge,
            r.response_len
        );
    }
    out("per_example.csv", s)?;

    let mut s = String::from("group,n,mean,std,sem,median,q1,q3,whisker_low,whisker_high,min,max\n");
    let split = &report.cde_by_correctness;
    for (name, g) in [("correct", &split.correct), ("wrong", &split.wrong), ("overall", &split.overall)] {
        if let Some(g) = g {
            let _ = writeln!(
                s,
                "{name},{},{},{},{},{},{},{},{},{},{},{}",
                g.n, g.mean, g.std, g.sem, g.median, g.q1, g.q3, g.whisker_low, g.whisker_high, g.min, g.max
            );
        }
    }
    out("cde_boxplot.csv", s)?;

    let mut s = String::from("id,task,cde,judge,correct\n");
    for r in &report.records {
        let _ = writeln!(s, "{},{},{},{},{}", r.id, r.task.name(), r.cde, r.judge, r.correct);
    }
    out("scatter.csv", s)?;

    let mut s = String::from("task,macro_f1\n");
    for (k, v) in &report.per_task_f1 {
        let _ = writeln!(s, "{k},{v}");
    }
    let _ = writeln!(s, "fine_grained,{}", report.fine_grained_f1);
    out("f1_table.csv", s)?;
    Ok(paths)
}
