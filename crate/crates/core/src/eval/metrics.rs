use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::vocab::TokenId;

/// Unweighted mean over `inventory` of per-label presence F1. A label that is
/// neither predicted nor present in any gold set scores 0.
pub fn macro_f1(preds: &[Vec<TokenId>], golds: &[Vec<TokenId>], inventory: &[TokenId]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::invalid(format!("{} predictions for {} gold sets", preds.len(), golds.len())));
    }
    if inventory.is_empty() {
        return Err(Error::invalid("empty label inventory"));
    }
    let mut total = 0.0;
    for label in inventory {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (p, g) in preds.iter().zip(golds) {
            match (p.contains(label), g.contains(label)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let denom = 2 * tp + fp + fn_;
        if denom > 0 {
            total += 2.0 * tp as f64 / denom as f64;
        }
    }
    Ok(total / inventory.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationMethod {
    Pearson,
    Spearman,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub method: CorrelationMethod,
    pub coefficient: f64,
    /// Two-sided.
    pub p_value: f64,
    pub n: usize,
}

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::invalid(format!("{} xs for {} ys", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(Error::invalid(format!("correlation needs n >= 3, got {}", xs.len())));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value in correlation input"));
    }
    Ok(())
}

fn product_moment(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Two-sided p-value from the t approximation with `n − 2` degrees of freedom.
fn t_p_value(r: f64, n: usize) -> f64 {
    if n <= 2 || r.abs() >= 1.0 {
        return if r.abs() >= 1.0 { 0.0 } else { 1.0 };
    }
    let df = (n - 2) as f64;
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

/// Average ranks (1-based); ties share the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<CorrelationResult> {
    check_pair(xs, ys)?;
    let r = product_moment(xs, ys)?;
    Ok(CorrelationResult { method: CorrelationMethod::Pearson, coefficient: r, p_value: t_p_value(r, xs.len()), n: xs.len() })
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<CorrelationResult> {
    check_pair(xs, ys)?;
    let r = product_moment(&average_ranks(xs), &average_ranks(ys))?;
    Ok(CorrelationResult { method: CorrelationMethod::Spearman, coefficient: r, p_value: t_p_value(r, xs.len()), n: xs.len() })
}

/// Two-sided permutation p-value: the share of `rounds` shuffles of `ys`
/// whose |coefficient| reaches the observed one (with the +1 correction).
pub fn permutation_p_value<R: Rng + ?Sized>(
    xs: &[f64],
    ys: &[f64],
    method: CorrelationMethod,
    rounds: usize,
    rng: &mut R,
) -> Result<f64> {
    let coef = |a: &[f64], b: &[f64]| match method {
        CorrelationMethod::Pearson => pearson(a, b).map(|c| c.coefficient),
        CorrelationMethod::Spearman => spearman(a, b).map(|c| c.coefficient),
    };
    let observed = coef(xs, ys)?.abs();
    let mut shuffled = ys.to_vec();
    let mut hits = 0usize;
    for _ in 0..rounds {
        shuffled.shuffle(rng);
        if coef(xs, &shuffled)?.abs() >= observed - 1e-12 {
            hits += 1;
        }
    }
    Ok((hits + 1) as f64 / (rounds + 1) as f64)
}

/// Box-plot summary of one group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (`n − 1`); 0 for a single value.
    pub std: f64,
    pub sem: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    /// Most extreme values within 1.5·IQR of the quartiles.
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub min: f64,
    pub max: f64,
}

/// Quantile by linear interpolation between order statistics (`h = (n−1)p`).
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl GroupStats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = if n > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        let (q1, median, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
        let iqr = q3 - q1;
        let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        let whisker_low = v.iter().copied().find(|&x| x >= lo).unwrap_or(v[0]);
        let whisker_high = v.iter().rev().copied().find(|&x| x <= hi).unwrap_or(v[n - 1]);
        Some(Self {
            n,
            mean,
            std,
            sem: std / (n as f64).sqrt(),
            median,
            q1,
            q3,
            whisker_low,
            whisker_high,
            min: v[0],
            max: v[n - 1],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectnessSplit {
    pub correct: Option<GroupStats>,
    pub wrong: Option<GroupStats>,
    pub overall: Option<GroupStats>,
}

/// Splits `(cde, correct)` records by correctness; an empty group is `None`.
pub fn cde_by_correctness(records: &[(f64, bool)]) -> CorrectnessSplit {
    let pick = |want: bool| records.iter().filter(|r| r.1 == want).map(|r| r.0).collect::<Vec<f64>>();
    let all: Vec<f64> = records.iter().map(|r| r.0).collect();
    CorrectnessSplit { correct: GroupStats::of(&pick(true)), wrong: GroupStats::of(&pick(false)), overall: GroupStats::of(&all) }
}
