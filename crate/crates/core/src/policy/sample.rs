use rand::Rng;

use super::forward::Work;
use super::Snapshot;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vocab::TokenId;

/// Draws one token from `softmax(log_probs / temperature)`; temperature 0 is argmax.
pub fn sample_token<S: Scalar, R: Rng + ?Sized>(log_probs: &[S], temperature: f64, rng: &mut R) -> TokenId {
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &v) in log_probs.iter().enumerate() {
            if v > log_probs[best] {
                best = i;
            }
        }
        return TokenId(best as u16);
    }
    let inv_t = 1.0 / temperature;
    let scaled: Vec<f64> = log_probs.iter().map(|v| v.as_f64() * inv_t).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return TokenId(i as u16);
        }
        u -= w;
    }
    // rounding left mass past the end: fall back to the last non-zero weight
    let last = weights.iter().rposition(|&w| w > 0.0).unwrap_or(0);
    TokenId(last as u16)
}

/// Samples a response after `x`, stopping after the end-of-sequence token or
/// `max_len` tokens. The end-of-sequence token is kept in the output.
pub fn sample_response<S: Scalar, R: Rng + ?Sized>(
    snap: &Snapshot<S>,
    x: &[TokenId],
    temperature: f64,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    sample_until(snap, x, temperature, max_len, &[snap.params().tokens().eos], rng)
}

/// Samples after `x` until one of `stop` is emitted (kept) or `max_len` tokens.
pub(crate) fn sample_until<S: Scalar, R: Rng + ?Sized>(
    snap: &Snapshot<S>,
    x: &[TokenId],
    temperature: f64,
    max_len: usize,
    stop: &[TokenId],
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!("temperature {temperature} must be >= 0")));
    }
    if max_len == 0 {
        return Err(Error::invalid("max_len must be positive"));
    }
    snap.params().check_tokens(x)?;
    let mut seq = x.to_vec();
    let mut work = Work::new(snap);
    for _ in 0..max_len {
        let p = seq.len();
        snap.log_probs_at(&seq, p, &mut work);
        let t = sample_token(&work.logits, temperature, rng);
        seq.push(t);
        if stop.contains(&t) {
            break;
        }
    }
    Ok(seq.split_off(x.len()))
}
