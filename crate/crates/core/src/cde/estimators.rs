use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CdeEstimate, CdeItem, DecisionProbe, EstimatorConfig, EstimatorMethod, ExampleEntropies};
use crate::error::{Error, Result};
use crate::policy::{decision_distribution, next_token_log_probs, sample_response, sequence_log_prob, DecisionDistribution, Snapshot};
use crate::policy::sample_until;
use crate::rng;
use crate::scalar::{entropy, Scalar};
use crate::task::{parse_response, FormatError, TaskKind, TaskVocab};
use crate::vocab::{TokenId, Vocab};

/// Samples one explanation after `x`; returns it without the closing token,
/// together with `log π(e, close | x)` (a forced close contributes nothing).
pub fn sample_explanation<S: Scalar, R: Rng + ?Sized>(
    snap: &Snapshot<S>,
    x: &[TokenId],
    probe: &DecisionProbe,
    temperature: f64,
    rng: &mut R,
) -> Result<(Vec<TokenId>, f64)> {
    let ctx = probe.explanation_context(x);
    let mut drawn = sample_until(snap, &ctx, temperature, probe.max_explanation_len, &[probe.close], rng)?;
    let lp = sequence_log_prob(snap, &ctx, &drawn)?.as_f64();
    if drawn.last() == Some(&probe.close) {
        drawn.pop();
    }
    Ok((drawn, lp))
}

/// Entropy of the top-k truncated decision distribution after explanation `e`.
/// With a non-empty `label`, the label tokens are teacher-forced and the
/// per-position entropies averaged.
pub fn exact_decision_entropy<S: Scalar>(
    snap: &Snapshot<S>,
    x: &[TokenId],
    e: &[TokenId],
    probe: &DecisionProbe,
    label: &[TokenId],
    top_k: usize,
) -> f64 {
    let mut ctx = probe.decision_context(x, e);
    if label.is_empty() {
        return decision_distribution(snap, &ctx, top_k).entropy().as_f64();
    }
    let mut total = 0.0;
    for &t in label {
        total += decision_distribution(snap, &ctx, top_k).entropy().as_f64();
        ctx.push(t);
    }
    total / label.len() as f64
}

/// Mean top-k entropy over the label positions of a sampled response's answer,
/// teacher-forced on the response. `None` when the response does not parse.
pub fn response_decision_entropy<S: Scalar>(
    snap: &Snapshot<S>,
    x: &[TokenId],
    response: &[TokenId],
    task: TaskKind,
    tv: &TaskVocab,
    top_k: usize,
) -> Option<f64> {
    parse_response(response, task, tv).ok()?;
    let open = tv.vocab().specials().answer_open;
    let start = response.iter().position(|&t| t == open)? + 1;
    let mut ctx = x.to_vec();
    ctx.extend_from_slice(&response[..start]);
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, &t) in response[start..].iter().enumerate() {
        if tv.vocab().is_decision(t) && i % 2 == 0 {
            total += decision_distribution(snap, &ctx, top_k).entropy().as_f64();
            n += 1;
        }
        ctx.push(t);
    }
    (n > 0).then(|| total / n as f64)
}

fn per_item<S, F>(snap: &Snapshot<S>, items: &[CdeItem], label: &str, base: u64, f: F) -> Result<Vec<ExampleEntropies>>
where
    S: Scalar,
    F: Fn(&mut rng::StreamRng, &CdeItem) -> Result<Vec<f64>> + Sync,
{
    let _ = snap;
    items
        .par_iter()
        .map(|item| {
            let mut r = rng::stream(base, label, &[item.id]);
            Ok(ExampleEntropies { id: item.id, entropies: f(&mut r, item)? })
        })
        .collect()
}

/// Monte-Carlo dataset estimate: `K` explanations per example, exact decision
/// entropy for each, averaged over all `K·|D|` samples.
pub fn dataset_cde<S: Scalar, R: Rng + ?Sized>(
    snap: &Snapshot<S>,
    items: &[CdeItem],
    probe: &DecisionProbe,
    cfg: &EstimatorConfig,
    rng: &mut R,
) -> Result<CdeEstimate> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let base: u64 = rng.random();
    let per = per_item(snap, items, "cde-mc", base, |r, item| {
        (0..cfg.k)
            .map(|_| {
                let (e, _) = sample_explanation(snap, &item.x, probe, cfg.temperature, r)?;
                Ok(exact_decision_entropy(snap, &item.x, &e, probe, &[], cfg.top_k))
            })
            .collect()
    })?;
    Ok(CdeEstimate::from_parts(EstimatorMethod::McDataset, cfg.k, cfg.top_k, per))
}

fn sample_from<S: Scalar, R: Rng + ?Sized>(d: &DecisionDistribution<S>, rng: &mut R) -> (TokenId, f64) {
    let mut u = rng.random::<f64>();
    for (t, p) in d.support.iter().zip(&d.probs) {
        let p = p.as_f64();
        if u < p {
            return (*t, p);
        }
        u -= p;
    }
    let last = d.probs.iter().rposition(|p| p.as_f64() > 0.0).unwrap_or(0);
    (d.support[last], d.probs[last].as_f64())
}

/// Chain-rule estimate `Ĥ((e, d) | x) − Ĥ(e | x)` from paired samples of
/// explanation and decision. Per-sample values are decision surprisals
/// `−ln p(d | e, x)`, whose mean estimates the conditional entropy.
pub fn chain_rule_cde<S: Scalar, R: Rng + ?Sized>(
    snap: &Snapshot<S>,
    items: &[CdeItem],
    probe: &DecisionProbe,
    cfg: &EstimatorConfig,
    rng: &mut R,
) -> Result<CdeEstimate> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let base: u64 = rng.random();
    let per = per_item(snap, items, "cde-chain", base, |r, item| {
        (0..cfg.k)
            .map(|_| {
                let (e, lp_e) = sample_explanation(snap, &item.x, probe, cfg.temperature, r)?;
                let d = decision_distribution(snap, &probe.decision_context(&item.x, &e), cfg.top_k);
                let (_, p) = sample_from(&d, r);
                let joint = -lp_e - p.ln();
                let reasoning = -lp_e;
                Ok(joint - reasoning)
            })
            .collect()
    })?;
    Ok(CdeEstimate::from_parts(EstimatorMethod::ChainRule, cfg.k, cfg.top_k, per))
}

/// Entropies obtained by enumerating every explanation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnumeratedCde {
    /// `H((e, d) | x)`.
    pub joint: f64,
    /// `H(e | x)`.
    pub explanation: f64,
    /// `H(d | e, x) = Σ_e p(e) H(d | e, x)`.
    pub decision: f64,
    pub explanations: usize,
}

/// Exact entropies by walking every explanation the probe allows. Fails when
/// more than `limit` explanations would be visited.
pub fn enumerate_cde<S: Scalar>(snap: &Snapshot<S>, x: &[TokenId], probe: &DecisionProbe, top_k: usize, limit: usize) -> Result<EnumeratedCde> {
    let v = snap.params().vocab_size() as f64;
    let leaves = (0..=probe.max_explanation_len).map(|n| v.powi(n as i32)).sum::<f64>();
    if leaves > limit as f64 {
        return Err(Error::Estimation(format!("{leaves} explanations exceed the enumeration limit {limit}")));
    }
    let mut out = EnumeratedCde { joint: 0.0, explanation: 0.0, decision: 0.0, explanations: 0 };
    let ctx = probe.explanation_context(x);
    let mut e = Vec::new();
    walk(snap, &ctx, probe, top_k, x, &mut e, 0.0, &mut out);
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn walk<S: Scalar>(
    snap: &Snapshot<S>,
    ctx: &[TokenId],
    probe: &DecisionProbe,
    top_k: usize,
    x: &[TokenId],
    e: &mut Vec<TokenId>,
    log_p: f64,
    out: &mut EnumeratedCde,
) {
    let leaf = |e: &[TokenId], log_p: f64, out: &mut EnumeratedCde| {
        let p = log_p.exp();
        let d = decision_distribution(snap, &probe.decision_context(x, e), top_k);
        let h = d.entropy().as_f64();
        out.explanation -= p * log_p;
        out.decision += p * h;
        for q in &d.probs {
            let q = q.as_f64();
            if q > 0.0 && p > 0.0 {
                out.joint -= p * q * (log_p + q.ln());
            }
        }
        out.explanations += 1;
    };
    let mut full = ctx.to_vec();
    full.extend_from_slice(e);
    let lp = next_token_log_probs(snap, &full);
    for (t, l) in lp.iter().enumerate() {
        let t = TokenId(t as u16);
        let next = log_p + l.as_f64();
        if t == probe.close {
            leaf(e, next, out);
        } else {
            e.push(t);
            if e.len() == probe.max_explanation_len {
                leaf(e, next, out);
            } else {
                walk(snap, ctx, probe, top_k, x, e, next, out);
            }
            e.pop();
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitFreeEstimate {
    pub entropy: f64,
    pub kept: usize,
    pub discarded: usize,
    /// Distinct decisions with their counts, in lexicographic order of token ids.
    pub counts: Vec<(Vec<TokenId>, usize)>,
}

/// Plug-in entropy of the empirical decision distribution over `k` draws of a
/// black-box sampler. Draws that fail to parse are discarded and counted.
pub fn logit_free_cde<R, F>(mut sampler: F, k: usize, rng: &mut R) -> Result<LogitFreeEstimate>
where
    R: Rng + ?Sized,
    F: FnMut(&mut R) -> Result<Vec<TokenId>, FormatError>,
{
    if k == 0 {
        return Err(Error::config("K must be at least 1"));
    }
    let mut counts: BTreeMap<Vec<TokenId>, usize> = BTreeMap::new();
    let mut discarded = 0;
    for _ in 0..k {
        match sampler(rng) {
            Ok(d) => *counts.entry(d).or_default() += 1,
            Err(_) => discarded += 1,
        }
    }
    let kept = k - discarded;
    if kept == 0 {
        return Err(Error::Estimation(format!("all {k} samples were unparseable")));
    }
    let probs: Vec<f64> = counts.values().map(|&c| c as f64 / kept as f64).collect();
    Ok(LogitFreeEstimate { entropy: entropy(&probs), kept, discarded, counts: counts.into_iter().collect() })
}

/// Black-box sampler over full responses of the policy.
pub fn policy_sampler<'a, S: Scalar, R: Rng + ?Sized>(
    snap: &'a Snapshot<S>,
    x: &'a [TokenId],
    task: TaskKind,
    tv: &'a TaskVocab,
    temperature: f64,
    max_len: usize,
) -> impl FnMut(&mut R) -> Result<Vec<TokenId>, FormatError> + 'a {
    move |r: &mut R| {
        let y = sample_response(snap, x, temperature, max_len, r).map_err(|_| FormatError::EmptyAnswer)?;
        parse_response(&y, task, tv).map(|p| p.labels)
    }
}

/// Sampler that keeps the reasoning `e` fixed and resamples only what follows `</think>`.
pub fn fixed_reasoning_sampler<'a, S: Scalar, R: Rng + ?Sized>(
    snap: &'a Snapshot<S>,
    x: &'a [TokenId],
    e: &'a [TokenId],
    task: TaskKind,
    tv: &'a TaskVocab,
    temperature: f64,
    max_len: usize,
) -> impl FnMut(&mut R) -> Result<Vec<TokenId>, FormatError> + 'a {
    let sp = *tv.vocab().specials();
    let mut head = vec![sp.think_open];
    head.extend_from_slice(e);
    head.push(sp.think_close);
    move |r: &mut R| {
        let mut ctx = x.to_vec();
        ctx.extend_from_slice(&head);
        let tail = sample_response(snap, &ctx, temperature, max_len, r).map_err(|_| FormatError::EmptyAnswer)?;
        let mut y = head.clone();
        y.extend(tail);
        parse_response(&y, task, tv).map(|p| p.labels)
    }
}

/// Grouping of decision tokens into the two binary outcomes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecisionCollapseMap {
    pub yes: TokenId,
    pub no: TokenId,
    pub yes_group: Vec<TokenId>,
    pub no_group: Vec<TokenId>,
}

impl DecisionCollapseMap {
    pub fn new(yes: TokenId, no: TokenId, yes_group: Vec<TokenId>, no_group: Vec<TokenId>, vocab: Option<&Vocab>) -> Result<Self> {
        if yes_group.iter().any(|t| no_group.contains(t)) {
            return Err(Error::invalid("collapse groups overlap"));
        }
        if let Some(v) = vocab {
            if let Some(t) = yes_group.iter().chain(&no_group).find(|&&t| !v.is_decision(t)) {
                return Err(Error::invalid(format!("{} is not a decision token", v.token(*t))));
            }
        }
        Ok(Self { yes, no, yes_group, no_group })
    }

    /// Hateful-side labels versus Benign/No for the task vocabulary.
    pub fn standard(tv: &TaskVocab) -> Self {
        let mut yes_group = vec![tv.yes];
        yes_group.extend(tv.attack_labels);
        yes_group.extend(tv.target_labels);
        Self { yes: tv.yes, no: tv.no, yes_group, no_group: vec![tv.no, tv.benign] }
    }
}

/// Sums each group's mass, drops everything else, and renormalises over `{Yes, No}`.
pub fn collapse_binary<S: Scalar>(dist: &DecisionDistribution<S>, map: &DecisionCollapseMap) -> Result<DecisionDistribution<S>> {
    let mut yes = S::zero();
    let mut no = S::zero();
    for (t, &p) in dist.support.iter().zip(&dist.probs) {
        if map.yes_group.contains(t) {
            yes = yes + p;
        } else if map.no_group.contains(t) {
            no = no + p;
        }
    }
    let z = yes + no;
    if z <= S::zero() {
        return Err(Error::Estimation("both collapse groups have zero mass".into()));
    }
    Ok(DecisionDistribution { support: vec![map.yes, map.no], probs: vec![yes / z, no / z] })
}
