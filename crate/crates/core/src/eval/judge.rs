//! Explanation scoring: the deterministic cue-overlap judge and an HTTP client
//! for an external judge service.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::task::TaskVocab;
use crate::vocab::TokenId;

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("judge endpoint timed out or unreachable after {attempts} attempts: {detail}")]
    Timeout { attempts: u32, detail: String },
    #[error("malformed judge response: {0}")]
    Malformed(String),
    #[error("judge score {0} outside 0..=10")]
    ScoreOutOfRange(i64),
    #[error("no judge endpoint configured")]
    NotConfigured,
}

/// Score in `0..=10`: `round(10·|shared cues| / |gold cues|) − 2·|hallucinated cues|`,
/// clamped. A gold explanation without cues (benign) scores 10 minus the
/// hallucination penalty, so a cue-free explanation of a benign meme gets 10.
pub fn oracle_judge_score(model: &[TokenId], gold: &[TokenId], tv: &TaskVocab) -> u8 {
    let cues = |e: &[TokenId]| {
        let mut c: Vec<TokenId> = e.iter().copied().filter(|&t| tv.is_cue(t)).collect();
        c.sort();
        c.dedup();
        c
    };
    let g = cues(gold);
    let m = cues(model);
    let shared = m.iter().filter(|t| g.contains(t)).count() as i64;
    let hallucinated = m.iter().filter(|t| !g.contains(t)).count() as i64;
    let base = if g.is_empty() { 10 } else { (10.0 * shared as f64 / g.len() as f64).round() as i64 };
    (base - 2 * hallucinated).clamp(0, 10) as u8
}

/// Rubric sent with every external request; placeholders are filled by the service.
pub const JUDGE_PROMPT_TEMPLATE: &str = "Compare the model-generated reasoning with the reference human reasoning for this hateful meme.

Reference: {reference_reasoning}

Model: {model_reasoning}

Model Prediction: {model_prediction}

Rate how well the model reasoning aligns with the reference on a scale of 0-10:
- 9-10: Excellent alignment, captures all key points
- 7-8: Good alignment, captures most key points
- 5-6: Satisfactory alignment, captures some key points
- 3-4: Poor alignment, misses many key points
- 1-2: Very poor alignment, minimal understanding
- 0: Completely wrong or unrelated

Score: [0-10]

Explanation: [1-2 sentences]";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgeConfig {
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub attempts: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self { endpoint: None, timeout_ms: 30_000, attempts: 3, backoff_ms: 200, max_in_flight: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub reference: String,
    pub model: String,
    pub prediction: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeResponse {
    pub score: u8,
    pub explanation: String,
}

#[derive(Serialize)]
struct Wire<'a> {
    reference: &'a str,
    model: &'a str,
    prediction: &'a str,
    prompt_template: &'a str,
}

pub struct JudgeClient {
    agent: ureq::Agent,
    endpoint: String,
    cfg: JudgeConfig,
}

impl JudgeClient {
    pub fn new(cfg: JudgeConfig) -> Result<Self, JudgeError> {
        let endpoint = cfg.endpoint.clone().ok_or(JudgeError::NotConfigured)?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { agent, endpoint, cfg })
    }

    /// Sends one request, retrying transport failures and server errors with
    /// exponential backoff. Malformed or out-of-range answers are not retried.
    pub fn judge(&self, req: &JudgeRequest) -> Result<JudgeResponse, JudgeError> {
        let wire = Wire {
            reference: &req.reference,
            model: &req.model,
            prediction: &req.prediction,
            prompt_template: JUDGE_PROMPT_TEMPLATE,
        };
        let attempts = self.cfg.attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                thread::sleep(Duration::from_millis(self.cfg.backoff_ms << (attempt - 1)));
            }
            match self.agent.post(&self.endpoint).send_json(&wire) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if status >= 500 {
                        last = format!("HTTP {status}");
                        continue;
                    }
                    if status >= 400 {
                        return Err(JudgeError::Malformed(format!("HTTP {status}")));
                    }
                    let text = resp.body_mut().read_to_string().map_err(|e| JudgeError::Malformed(e.to_string()))?;
                    return parse_judge_body(&text);
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(JudgeError::Timeout { attempts, detail: last })
    }

    /// Judges every request with at most `max_in_flight` concurrent calls;
    /// results are returned in request order.
    pub fn judge_all(&self, reqs: &[JudgeRequest]) -> Vec<Result<JudgeResponse, JudgeError>> {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<JudgeResponse, JudgeError>>>> = reqs.iter().map(|_| Mutex::new(None)).collect();
        let workers = self.cfg.max_in_flight.max(1).min(reqs.len().max(1));
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= reqs.len() {
                        break;
                    }
                    let r = self.judge(&reqs[i]);
                    *slots[i].lock().expect("slot lock") = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().expect("slot lock").expect("every slot filled"))
            .collect()
    }
}

fn parse_judge_body(text: &str) -> Result<JudgeResponse, JudgeError> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(|e| JudgeError::Malformed(e.to_string()))?;
    let score = v
        .get("score")
        .and_then(|s| s.as_i64())
        .ok_or_else(|| JudgeError::Malformed("missing integer score".into()))?;
    if !(0..=10).contains(&score) {
        return Err(JudgeError::ScoreOutOfRange(score));
    }
    let explanation = match v.get("explanation") {
        None | Some(serde_json::Value::Null) => String::new(),
        Some(serde_json::Value::String(s)) => s.clone(),
        Some(_) => return Err(JudgeError::Malformed("explanation is not a string".into())),
    };
    Ok(JudgeResponse { score: score as u8, explanation })
}
