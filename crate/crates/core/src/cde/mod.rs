//! Conditional decision entropy `H(d | e, x)`: exact per-explanation values,
//! Monte-Carlo dataset estimates, the chain-rule estimator, a logit-free
//! plug-in estimator and the binary collapse.

mod estimators;

pub use estimators::{
    chain_rule_cde, collapse_binary, dataset_cde, enumerate_cde, exact_decision_entropy, logit_free_cde,
    fixed_reasoning_sampler, policy_sampler, response_decision_entropy, sample_explanation, DecisionCollapseMap,
    EnumeratedCde, LogitFreeEstimate,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::TaskVocab;
use crate::vocab::TokenId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMethod {
    Exact,
    McDataset,
    ChainRule,
    LogitFree,
}

impl EstimatorMethod {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorMethod::Exact => "exact",
            EstimatorMethod::McDataset => "mc_dataset",
            EstimatorMethod::ChainRule => "chain_rule",
            EstimatorMethod::LogitFree => "logit_free",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    #[serde(rename = "K")]
    pub k: usize,
    pub top_k: usize,
    pub temperature: f64,
    pub method: EstimatorMethod,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { k: 16, top_k: 10, temperature: 1.0, method: EstimatorMethod::McDataset }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("K must be at least 1"));
        }
        if self.top_k < 2 {
            return Err(Error::config("top_k must be at least 2"));
        }
        if !(0.7..=1.0).contains(&self.temperature) {
            return Err(Error::config(format!("estimator temperature {} outside [0.7, 1.0]", self.temperature)));
        }
        Ok(())
    }
}

/// Where explanations start and end, and what precedes the decision.
///
/// An explanation is sampled after `x ++ open` until `close` is emitted or
/// `max_explanation_len` tokens have been drawn (then `close` is forced). The
/// decision is read at the position after `x ++ open ++ e ++ close ++ answer_prefix`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecisionProbe {
    pub open: Option<TokenId>,
    pub close: TokenId,
    pub answer_prefix: Vec<TokenId>,
    pub max_explanation_len: usize,
}

impl DecisionProbe {
    /// Probe for the think/answer template.
    pub fn template(tv: &TaskVocab, max_explanation_len: usize) -> Self {
        let sp = tv.vocab().specials();
        Self {
            open: Some(sp.think_open),
            close: sp.think_close,
            answer_prefix: vec![sp.answer_open],
            max_explanation_len,
        }
    }

    pub(crate) fn explanation_context(&self, x: &[TokenId]) -> Vec<TokenId> {
        let mut c = x.to_vec();
        c.extend(self.open);
        c
    }

    pub(crate) fn decision_context(&self, x: &[TokenId], e: &[TokenId]) -> Vec<TokenId> {
        let mut c = self.explanation_context(x);
        c.extend_from_slice(e);
        c.push(self.close);
        c.extend_from_slice(&self.answer_prefix);
        c
    }
}

/// A prompt to estimate on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdeItem {
    pub id: u64,
    pub x: Vec<TokenId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleEntropies {
    pub id: u64,
    pub entropies: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdeEstimate {
    pub method: EstimatorMethod,
    #[serde(rename = "K")]
    pub k: usize,
    pub top_k: usize,
    pub mean: f64,
    pub per_example: Vec<ExampleEntropies>,
}

impl CdeEstimate {
    pub fn from_parts(method: EstimatorMethod, k: usize, top_k: usize, mut per_example: Vec<ExampleEntropies>) -> Self {
        per_example.sort_by_key(|e| e.id);
        let n: usize = per_example.iter().map(|e| e.entropies.len()).sum();
        let total: f64 = per_example.iter().flat_map(|e| e.entropies.iter()).sum();
        let mean = if n == 0 { 0.0 } else { total / n as f64 };
        Self { method, k, top_k, mean, per_example }
    }

    /// Mean entropy of one example.
    pub fn example_mean(&self, id: u64) -> Option<f64> {
        self.per_example
            .iter()
            .find(|e| e.id == id)
            .filter(|e| !e.entropies.is_empty())
            .map(|e| e.entropies.iter().sum::<f64>() / e.entropies.len() as f64)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
