use serde::{Deserialize, Serialize};

use super::Snapshot;
use crate::error::{Error, Result};
use crate::scalar::{entropy, log_softmax_in_place, Scalar};
use crate::vocab::TokenId;

/// Scratch buffers for one forward pass.
pub(crate) struct Work<S> {
    pub window: Vec<TokenId>,
    pub hid: Vec<S>,
    pub logits: Vec<S>,
}

impl<S: Scalar> Work<S> {
    pub fn new(snap: &Snapshot<S>) -> Self {
        let l = snap.params().layout();
        Self { window: vec![TokenId(0); l.c], hid: vec![S::zero(); l.h], logits: vec![S::zero(); l.vocab] }
    }
}

impl<S: Scalar> Snapshot<S> {
    /// Window of the `C` tokens preceding position `p` of `seq`, left-padded.
    pub(crate) fn fill_window(&self, seq: &[TokenId], p: usize, out: &mut [TokenId]) {
        let c = out.len();
        let pad = self.params().tokens().pad;
        for (j, w) in out.iter_mut().enumerate() {
            let back = c - j;
            *w = if p >= back { seq[p - back] } else { pad };
        }
    }

    pub(crate) fn hidden(&self, window: &[TokenId], hid: &mut [S]) {
        let l = self.params().layout();
        let table = self.table();
        hid.copy_from_slice(self.params().b1());
        for (j, w) in window.iter().enumerate() {
            let row = &table[(j * l.vocab + w.idx()) * l.h..(j * l.vocab + w.idx() + 1) * l.h];
            for (a, &b) in hid.iter_mut().zip(row) {
                *a = *a + b;
            }
        }
        for a in hid.iter_mut() {
            *a = a.tanh();
        }
    }

    pub(crate) fn logits(&self, hid: &[S], logits: &mut [S]) {
        let v = self.params().vocab_size();
        let w2 = self.params().w2();
        logits.iter_mut().for_each(|x| *x = S::zero());
        for (h, &a) in hid.iter().enumerate() {
            if a == S::zero() {
                continue;
            }
            let row = &w2[h * v..(h + 1) * v];
            for (o, &w) in logits.iter_mut().zip(row) {
                *o = *o + a * w;
            }
        }
    }

    /// Leaves the next-token log-distribution for position `p` in `work.logits`.
    pub(crate) fn log_probs_at(&self, seq: &[TokenId], p: usize, work: &mut Work<S>) {
        self.fill_window(seq, p, &mut work.window);
        self.hidden(&work.window, &mut work.hid);
        self.logits(&work.hid, &mut work.logits);
        log_softmax_in_place(&mut work.logits);
    }

    pub(crate) fn check_scoring(&self, x: &[TokenId], y: &[TokenId]) -> Result<()> {
        if y.is_empty() {
            return Err(Error::invalid("empty response"));
        }
        let max = self.params().config().max_seq_len;
        if x.len() + y.len() > max {
            return Err(Error::invalid(format!(
                "sequence length {} exceeds maximum {max}",
                x.len() + y.len()
            )));
        }
        self.params().check_tokens(x)?;
        self.params().check_tokens(y)
    }
}

/// `log π(y_t | y_<t, x)` for every response position.
pub fn token_log_probs<S: Scalar>(snap: &Snapshot<S>, x: &[TokenId], y: &[TokenId]) -> Result<Vec<S>> {
    snap.check_scoring(x, y)?;
    let seq: Vec<TokenId> = x.iter().chain(y).copied().collect();
    let mut work = Work::new(snap);
    Ok((x.len()..seq.len())
        .map(|p| {
            snap.log_probs_at(&seq, p, &mut work);
            work.logits[seq[p].idx()]
        })
        .collect())
}

/// `log π(y | x)`, summed in position order.
pub fn sequence_log_prob<S: Scalar>(snap: &Snapshot<S>, x: &[TokenId], y: &[TokenId]) -> Result<S> {
    Ok(token_log_probs(snap, x, y)?.into_iter().fold(S::zero(), |a, b| a + b))
}

/// Full next-token log-distribution after `context`.
pub fn next_token_log_probs<S: Scalar>(snap: &Snapshot<S>, context: &[TokenId]) -> Vec<S> {
    let mut work = Work::new(snap);
    snap.log_probs_at(context, context.len(), &mut work);
    work.logits
}

/// Mean next-token entropy over every response position of a batch.
pub fn mean_token_entropy<S: Scalar>(snap: &Snapshot<S>, batch: &[(Vec<TokenId>, Vec<TokenId>)]) -> Result<S> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut work = Work::new(snap);
    let mut total = S::zero();
    let mut n = 0usize;
    let mut probs = vec![S::zero(); snap.params().vocab_size()];
    for (x, y) in batch {
        snap.check_scoring(x, y)?;
        let seq: Vec<TokenId> = x.iter().chain(y).copied().collect();
        for p in x.len()..seq.len() {
            snap.log_probs_at(&seq, p, &mut work);
            for (q, &lp) in probs.iter_mut().zip(&work.logits) {
                *q = lp.exp();
            }
            total = total + entropy(&probs);
            n += 1;
        }
    }
    Ok(total / S::of(n as f64))
}

/// Next-token distribution at a decision position, optionally truncated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionDistribution<S> {
    pub support: Vec<TokenId>,
    pub probs: Vec<S>,
}

impl<S: Scalar> DecisionDistribution<S> {
    pub fn entropy(&self) -> S {
        entropy(&self.probs)
    }

    pub fn prob_of(&self, t: TokenId) -> S {
        self.support
            .iter()
            .position(|&s| s == t)
            .map(|i| self.probs[i])
            .unwrap_or_else(S::zero)
    }

    pub fn argmax(&self) -> Option<TokenId> {
        self.support.first().copied()
    }
}

/// Distribution of the token following `context`, restricted to the `top_k`
/// most likely tokens and renormalised. Support is ordered by descending
/// probability, ties broken by token index. `top_k >= V` keeps the full softmax.
pub fn decision_distribution<S: Scalar>(snap: &Snapshot<S>, context: &[TokenId], top_k: usize) -> DecisionDistribution<S> {
    let lp = next_token_log_probs(snap, context);
    truncate_top_k(&lp, top_k)
}

pub(crate) fn truncate_top_k<S: Scalar>(log_probs: &[S], top_k: usize) -> DecisionDistribution<S> {
    let mut order: Vec<usize> = (0..log_probs.len()).collect();
    order.sort_by(|&a, &b| log_probs[b].partial_cmp(&log_probs[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let k = top_k.max(1).min(order.len());
    order.truncate(k);
    let mut probs: Vec<S> = order.iter().map(|&i| log_probs[i].exp()).collect();
    if k < log_probs.len() {
        let z: S = probs.iter().copied().sum();
        probs.iter_mut().for_each(|p| *p = *p / z);
    }
    DecisionDistribution { support: order.into_iter().map(|i| TokenId(i as u16)).collect(), probs }
}
