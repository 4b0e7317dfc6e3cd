//! Training objectives (SFT, DPO, GRPO) and the optimizer step.

mod dpo;
mod grpo;
mod optim;
mod sft;

pub use dpo::{dpo_loss_and_grad, sample_preference_pairs, DpoConfig, DpoItem, PairStats, PreferencePair};
pub use grpo::{group_advantages, grpo_loss_and_grad, kl_penalty, GroupRollout, GrpoConfig, RatioMode, ZeroStdPolicy};
pub use optim::{optimizer_step, OptimizerConfig, OptimizerState};
pub use sft::{sft_loss_and_grad, SftBatch};

use rayon::prelude::*;

use crate::error::Result;
use crate::policy::{GradAccumulator, Snapshot};
use crate::scalar::Scalar;

const CHUNK: usize = 8;

/// Runs `f` over `0..n` in fixed chunks and merges the per-chunk accumulators
/// in index order, so the result does not depend on scheduling.
pub(crate) fn accumulate_batch<S, F>(snap: &Snapshot<S>, n: usize, f: F) -> Result<GradAccumulator<S>>
where
    S: Scalar,
    F: Fn(usize, &mut GradAccumulator<S>) -> Result<()> + Sync,
{
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let parts: Vec<Result<GradAccumulator<S>>> = starts
        .par_iter()
        .map(|&s| {
            let mut acc = GradAccumulator::new(snap);
            for i in s..(s + CHUNK).min(n) {
                f(i, &mut acc)?;
            }
            Ok(acc)
        })
        .collect();
    let mut total = GradAccumulator::new(snap);
    for p in parts {
        total.merge(&p?);
    }
    Ok(total)
}
