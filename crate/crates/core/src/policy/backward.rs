use super::forward::Work;
use super::{Gradient, Snapshot};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vocab::TokenId;

/// Gradient accumulator that works in projection-table space.
///
/// Hidden pre-activations are sums of per-slot table rows, so back-propagation
/// only touches `C` rows of `H` values per position; [`GradAccumulator::finalize`]
/// maps the table gradient back onto the embedding and `W1`.
#[derive(Clone, Debug)]
pub struct GradAccumulator<S> {
    table: Vec<S>,
    touched: Vec<bool>,
    b1: Vec<S>,
    w2: Vec<S>,
}

impl<S: Scalar> GradAccumulator<S> {
    pub fn new(snap: &Snapshot<S>) -> Self {
        let l = snap.params().layout();
        Self {
            table: vec![S::zero(); l.c * l.vocab * l.h],
            touched: vec![false; l.c * l.vocab],
            b1: vec![S::zero(); l.h],
            w2: vec![S::zero(); l.h * l.vocab],
        }
    }

    pub fn merge(&mut self, other: &GradAccumulator<S>) {
        for (a, &b) in self.table.iter_mut().zip(&other.table) {
            *a = *a + b;
        }
        for (a, &b) in self.touched.iter_mut().zip(&other.touched) {
            *a |= b;
        }
        for (a, &b) in self.b1.iter_mut().zip(&other.b1) {
            *a = *a + b;
        }
        for (a, &b) in self.w2.iter_mut().zip(&other.w2) {
            *a = *a + b;
        }
    }

    /// Expands into a parameter-aligned gradient.
    pub fn finalize(&self, snap: &Snapshot<S>) -> Result<Gradient<S>> {
        let p = snap.params();
        let l = *p.layout();
        let cd = l.c * l.d;
        let mut g = Gradient::zeros_like(p);
        let emb = p.embedding();
        let w1 = p.w1();
        {
            let (head, tail) = g.data.split_at_mut(l.w1);
            let demb = &mut head[l.emb..];
            let dw1 = &mut tail[..l.b1 - l.w1];
            for j in 0..l.c {
                for t in 0..l.vocab {
                    if !self.touched[j * l.vocab + t] {
                        continue;
                    }
                    let dt = &self.table[(j * l.vocab + t) * l.h..(j * l.vocab + t + 1) * l.h];
                    let e = &emb[t * l.d..(t + 1) * l.d];
                    let de = &mut demb[t * l.d..(t + 1) * l.d];
                    for (h, &gh) in dt.iter().enumerate() {
                        if gh == S::zero() {
                            continue;
                        }
                        let base = h * cd + j * l.d;
                        let wrow = &w1[base..base + l.d];
                        let drow = &mut dw1[base..base + l.d];
                        for k in 0..l.d {
                            drow[k] = drow[k] + gh * e[k];
                            de[k] = de[k] + gh * wrow[k];
                        }
                    }
                }
            }
        }
        g.data[l.b1..l.w2].copy_from_slice(&self.b1);
        g.data[l.w2..].copy_from_slice(&self.w2);
        if let Some(i) = g.data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric { layer: l.block_of(i) });
        }
        Ok(g)
    }
}

/// Adds `∇θ Σ_t weights[t] · log π(y_t | y_<t, x)` into `acc`.
/// Positions with zero weight are skipped.
pub fn accumulate_weighted_grad<S: Scalar>(
    snap: &Snapshot<S>,
    x: &[TokenId],
    y: &[TokenId],
    weights: &[S],
    acc: &mut GradAccumulator<S>,
) -> Result<()> {
    snap.check_scoring(x, y)?;
    if weights.len() != y.len() {
        return Err(Error::invalid(format!("{} weights for {} response tokens", weights.len(), y.len())));
    }
    let l = *snap.params().layout();
    let w2 = snap.params().w2();
    let seq: Vec<TokenId> = x.iter().chain(y).copied().collect();
    let mut work = Work::new(snap);
    let mut dlogits = vec![S::zero(); l.vocab];
    let mut dpre = vec![S::zero(); l.h];
    for (t, &w) in weights.iter().enumerate() {
        if w == S::zero() {
            continue;
        }
        let p = x.len() + t;
        snap.log_probs_at(&seq, p, &mut work);
        if work.hid.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { layer: "hidden layer" });
        }
        if work.logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { layer: "output projection" });
        }
        let target = seq[p].idx();
        for (v, d) in dlogits.iter_mut().enumerate() {
            let prob = work.logits[v].exp();
            let ind = if v == target { S::one() } else { S::zero() };
            *d = w * (ind - prob);
        }
        for h in 0..l.h {
            let a = work.hid[h];
            let row = &w2[h * l.vocab..(h + 1) * l.vocab];
            let grow = &mut acc.w2[h * l.vocab..(h + 1) * l.vocab];
            let mut dh = S::zero();
            for v in 0..l.vocab {
                grow[v] = grow[v] + a * dlogits[v];
                dh = dh + row[v] * dlogits[v];
            }
            dpre[h] = dh * (S::one() - a * a);
            acc.b1[h] = acc.b1[h] + dpre[h];
        }
        for (j, tok) in work.window.iter().enumerate() {
            let slot = j * l.vocab + tok.idx();
            acc.touched[slot] = true;
            let row = &mut acc.table[slot * l.h..(slot + 1) * l.h];
            for (a, &b) in row.iter_mut().zip(&dpre) {
                *a = *a + b;
            }
        }
    }
    Ok(())
}

/// `∇θ log π(y | x)`.
pub fn grad_sequence_log_prob<S: Scalar>(snap: &Snapshot<S>, x: &[TokenId], y: &[TokenId]) -> Result<Gradient<S>> {
    let mut acc = GradAccumulator::new(snap);
    accumulate_weighted_grad(snap, x, y, &vec![S::one(); y.len()], &mut acc)?;
    acc.finalize(snap)
}
