use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::accumulate_batch;
use crate::error::{Error, Result};
use crate::policy::{accumulate_weighted_grad, sample_response, sequence_log_prob, Gradient, Snapshot};
use crate::rng;
use crate::scalar::Scalar;
use crate::task::{parse_response, TaskKind, TaskVocab};
use crate::vocab::TokenId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    pub beta_pref: f64,
    pub pairs_per_example: usize,
    pub temperature: f64,
    pub max_response_len: usize,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self { beta_pref: 0.1, pairs_per_example: 2, temperature: 1.0, max_response_len: 24 }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_pref > 0.0 && self.beta_pref.is_finite()) {
            return Err(Error::config("beta_pref must be positive"));
        }
        if self.pairs_per_example == 0 {
            return Err(Error::config("pairs_per_example must be positive"));
        }
        if !(self.temperature > 0.0) || self.max_response_len == 0 {
            return Err(Error::config("temperature and max_response_len must be positive"));
        }
        Ok(())
    }
}

/// A prompt to build pairs for, with its gold decision.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DpoItem {
    pub id: u64,
    pub x: Vec<TokenId>,
    pub task: TaskKind,
    pub gold: Vec<TokenId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreferencePair {
    pub x: Vec<TokenId>,
    pub chosen: Vec<TokenId>,
    pub rejected: Vec<TokenId>,
    pub ref_chosen: f64,
    pub ref_rejected: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairStats {
    pub pairs: usize,
    /// Items whose samples were all chosen or all rejected.
    pub skipped: usize,
}

/// Samples `2·pairs_per_example` responses per item from the reference policy,
/// splits them by whether the parsed decision equals the gold labels, and pairs
/// chosen with rejected in sampling order.
pub fn sample_preference_pairs<S: Scalar, R: Rng + ?Sized>(
    reference: &Snapshot<S>,
    items: &[DpoItem],
    cfg: &DpoConfig,
    tv: &TaskVocab,
    rng: &mut R,
) -> Result<(Vec<PreferencePair>, PairStats)> {
    cfg.validate()?;
    let base: u64 = rng.random();
    let per_item: Vec<Result<Vec<PreferencePair>>> = items
        .par_iter()
        .map(|item| {
            let mut r = rng::stream(base, "dpo-pairs", &[item.id]);
            let mut chosen = Vec::new();
            let mut rejected = Vec::new();
            for _ in 0..2 * cfg.pairs_per_example {
                let y = sample_response(reference, &item.x, cfg.temperature, cfg.max_response_len, &mut r)?;
                let good = matches!(parse_response(&y, item.task, tv), Ok(p) if p.labels == item.gold);
                if good {
                    chosen.push(y);
                } else {
                    rejected.push(y);
                }
            }
            chosen
                .into_iter()
                .zip(rejected)
                .take(cfg.pairs_per_example)
                .map(|(c, r)| {
                    Ok(PreferencePair {
                        ref_chosen: sequence_log_prob(reference, &item.x, &c)?.as_f64(),
                        ref_rejected: sequence_log_prob(reference, &item.x, &r)?.as_f64(),
                        x: item.x.clone(),
                        chosen: c,
                        rejected: r,
                    })
                })
                .collect()
        })
        .collect();
    let mut pairs = Vec::new();
    let mut stats = PairStats::default();
    for p in per_item {
        let p = p?;
        if p.is_empty() {
            stats.skipped += 1;
        }
        pairs.extend(p);
    }
    stats.pairs = pairs.len();
    Ok((pairs, stats))
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean over pairs of `−log σ(β[(log π(y⁺) − log π_ref(y⁺)) − (log π(y⁻) − log π_ref(y⁻))])`.
pub fn dpo_loss_and_grad<S: Scalar>(snap: &Snapshot<S>, pairs: &[PreferencePair], cfg: &DpoConfig) -> Result<(S, Gradient<S>)> {
    if pairs.is_empty() {
        return Err(Error::invalid("no preference pairs"));
    }
    let n = pairs.len() as f64;
    let beta = cfg.beta_pref;
    let margins: Vec<f64> = pairs
        .iter()
        .map(|p| {
            let c = sequence_log_prob(snap, &p.x, &p.chosen)?.as_f64() - p.ref_chosen;
            let r = sequence_log_prob(snap, &p.x, &p.rejected)?.as_f64() - p.ref_rejected;
            Ok(beta * (c - r))
        })
        .collect::<Result<_>>()?;
    let loss = margins.iter().map(|&m| softplus(-m)).sum::<f64>() / n;
    let acc = accumulate_batch(snap, pairs.len(), |i, acc| {
        let p = &pairs[i];
        // d loss / d log π(y⁺) = −σ(−m)·β / n, opposite sign for y⁻
        let k = S::of(-sigmoid(-margins[i]) * beta / n);
        accumulate_weighted_grad(snap, &p.x, &p.chosen, &vec![k; p.chosen.len()], acc)?;
        accumulate_weighted_grad(snap, &p.x, &p.rejected, &vec![-k; p.rejected.len()], acc)
    })?;
    Ok((S::of(loss), acc.finalize(snap)?))
}
