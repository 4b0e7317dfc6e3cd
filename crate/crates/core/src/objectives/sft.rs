use super::accumulate_batch;
use crate::error::{Error, Result};
use crate::policy::{accumulate_weighted_grad, token_log_probs, Gradient, Snapshot};
use crate::scalar::Scalar;
use crate::vocab::TokenId;

/// `(x, y*)` pairs; the loss covers exactly the target positions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SftBatch {
    pub items: Vec<(Vec<TokenId>, Vec<TokenId>)>,
}

impl SftBatch {
    pub fn new(items: Vec<(Vec<TokenId>, Vec<TokenId>)>) -> Self {
        Self { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Mean over examples of `−Σ_t log π(y*_t | y*_<t, x)` and its gradient.
pub fn sft_loss_and_grad<S: Scalar>(snap: &Snapshot<S>, batch: &SftBatch) -> Result<(S, Gradient<S>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty SFT batch"));
    }
    let n = S::of(batch.len() as f64);
    let mut loss = S::zero();
    for (x, y) in &batch.items {
        loss = loss - token_log_probs(snap, x, y)?.into_iter().fold(S::zero(), |a, b| a + b);
    }
    let acc = accumulate_batch(snap, batch.len(), |i, acc| {
        let (x, y) = &batch.items[i];
        accumulate_weighted_grad(snap, x, y, &vec![-S::one() / n; y.len()], acc)
    })?;
    Ok((loss / n, acc.finalize(snap)?))
}
