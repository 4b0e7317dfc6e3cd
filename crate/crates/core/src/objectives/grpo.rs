use serde::{Deserialize, Serialize};

use super::accumulate_batch;
use crate::error::{Error, Result};
use crate::policy::{accumulate_weighted_grad, token_log_probs, Gradient, GradAccumulator, Snapshot, SnapshotId};
use crate::scalar::Scalar;
use crate::vocab::TokenId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioMode {
    PerToken,
    PerSequence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroStdPolicy {
    ZeroAdvantages,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub ratio_mode: RatioMode,
    pub zero_std_policy: ZeroStdPolicy,
    pub temperature: f64,
    pub max_response_len: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_eps: 0.2,
            kl_beta: 0.01,
            ratio_mode: RatioMode::PerToken,
            zero_std_policy: ZeroStdPolicy::ZeroAdvantages,
            temperature: 1.0,
            max_response_len: 24,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::config(format!("group size {} < 2", self.group_size)));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::config(format!("clip_eps {} outside (0, 1)", self.clip_eps)));
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return Err(Error::config("kl_beta must be non-negative"));
        }
        if !(self.temperature > 0.0) || self.max_response_len == 0 {
            return Err(Error::config("temperature and max_response_len must be positive"));
        }
        Ok(())
    }
}

/// `(r − mean) / std` with the population std; all zeros when the group ties.
pub fn group_advantages(rewards: &[f64], cfg: &GrpoConfig) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::invalid("a group needs at least two rewards"));
    }
    if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::invalid(format!("non-finite reward {r}")));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= 1e-12 * mean.abs().max(1.0) {
        return Ok(match cfg.zero_std_policy {
            ZeroStdPolicy::ZeroAdvantages => vec![0.0; rewards.len()],
        });
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// One prompt and the responses sampled for it from `θ_old`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupRollout {
    pub x: Vec<TokenId>,
    pub responses: Vec<Vec<TokenId>>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub snapshot: SnapshotId,
}

/// Per-token k3 estimate of `KL(π_θ ‖ π_ref)` averaged over response positions,
/// with its gradient with respect to θ.
pub fn kl_penalty<S: Scalar>(snap: &Snapshot<S>, reference: &Snapshot<S>, x: &[TokenId], y: &[TokenId]) -> Result<(S, Gradient<S>)> {
    let lp = token_log_probs(snap, x, y)?;
    let lr = token_log_probs(reference, x, y)?;
    let l = S::of(y.len() as f64);
    let mut value = S::zero();
    let mut w = Vec::with_capacity(y.len());
    for (&a, &b) in lp.iter().zip(&lr) {
        let u = b - a;
        let r = u.exp();
        value = value + (r - S::one() - u);
        w.push((S::one() - r) / l);
    }
    let mut acc = GradAccumulator::new(snap);
    accumulate_weighted_grad(snap, x, y, &w, &mut acc)?;
    Ok((value / l, acc.finalize(snap)?))
}

/// Whether the unclipped branch of `min(ρA, clip(ρ)A)` is the active one.
fn unclipped(ratio: f64, adv: f64, eps: f64) -> bool {
    if adv > 0.0 {
        ratio <= 1.0 + eps
    } else {
        ratio >= 1.0 - eps
    }
}

fn surrogate(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

struct Scored {
    lp: Vec<f64>,
    old: Vec<f64>,
    reference: Vec<f64>,
}

/// Loss whose minimisation ascends the clipped group objective minus
/// `β_kl · KL`. Each response contributes its per-token mean; responses are
/// averaged over all groups.
pub fn grpo_loss_and_grad<S: Scalar>(
    snap: &Snapshot<S>,
    old: &Snapshot<S>,
    reference: &Snapshot<S>,
    rollouts: &[GroupRollout],
    cfg: &GrpoConfig,
) -> Result<(S, Gradient<S>)> {
    cfg.validate()?;
    let mut jobs: Vec<(&[TokenId], &[TokenId], f64)> = Vec::new();
    for g in rollouts {
        if g.snapshot != old.id() {
            return Err(Error::Staleness { expected: g.snapshot.0, got: old.id().0 });
        }
        if g.responses.len() != g.advantages.len() {
            return Err(Error::invalid("one advantage per response required"));
        }
        for (y, &a) in g.responses.iter().zip(&g.advantages) {
            jobs.push((&g.x, y, a));
        }
    }
    if jobs.is_empty() {
        return Err(Error::invalid("no rollouts"));
    }
    let same_old = snap.id() == old.id();
    let same_ref = snap.id() == reference.id();
    let to64 = |v: Vec<S>| v.into_iter().map(|s| s.as_f64()).collect::<Vec<f64>>();
    let scored: Vec<Scored> = jobs
        .iter()
        .map(|&(x, y, _)| {
            let lp = to64(token_log_probs(snap, x, y)?);
            let old_lp = if same_old { lp.clone() } else { to64(token_log_probs(old, x, y)?) };
            let ref_lp = if same_ref { lp.clone() } else { to64(token_log_probs(reference, x, y)?) };
            Ok(Scored { lp, old: old_lp, reference: ref_lp })
        })
        .collect::<Result<_>>()?;

    let n = jobs.len() as f64;
    let eps = cfg.clip_eps;
    let beta = cfg.kl_beta;
    let mut loss = 0.0;
    let mut weights: Vec<Vec<f64>> = Vec::with_capacity(jobs.len());
    for (&(_, _, adv), s) in jobs.iter().zip(&scored) {
        let l = s.lp.len() as f64;
        let mut w = vec![0.0; s.lp.len()];
        let mut obj = 0.0;
        match cfg.ratio_mode {
            RatioMode::PerToken => {
                for t in 0..s.lp.len() {
                    let ratio = (s.lp[t] - s.old[t]).exp();
                    obj += surrogate(ratio, adv, eps);
                    if adv != 0.0 && unclipped(ratio, adv, eps) {
                        w[t] -= adv * ratio / (n * l);
                    }
                }
                obj /= l;
            }
            RatioMode::PerSequence => {
                let d: f64 = s.lp.iter().zip(&s.old).map(|(a, b)| a - b).sum();
                let ratio = d.exp();
                obj = surrogate(ratio, adv, eps);
                if adv != 0.0 && unclipped(ratio, adv, eps) {
                    w.iter_mut().for_each(|x| *x -= adv * ratio / n);
                }
            }
        }
        let mut kl = 0.0;
        for t in 0..s.lp.len() {
            let u = s.reference[t] - s.lp[t];
            let r = u.exp();
            kl += r - 1.0 - u;
            w[t] += beta * (1.0 - r) / (n * l);
        }
        loss += -obj / n + beta * (kl / l) / n;
        weights.push(w);
    }
    if !loss.is_finite() {
        return Err(Error::Numeric { layer: "output projection" });
    }
    let acc = accumulate_batch(snap, jobs.len(), |i, acc| {
        let (x, y, _) = jobs[i];
        let w: Vec<S> = weights[i].iter().map(|&v| S::of(v)).collect();
        accumulate_weighted_grad(snap, x, y, &w, acc)
    })?;
    Ok((S::of(loss), acc.finalize(snap)?))
}
