use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMix {
    pub attack: usize,
    pub target: usize,
    pub binary: usize,
}

/// One line of the GRPO run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: u8,
    pub task_mix: TaskMix,
    pub mean_total_reward: f64,
    pub mean_r_format: f64,
    pub mean_r_acc: f64,
    pub mean_r_cde: f64,
    /// Mean next-token entropy of `θ_old` over the step's sampled responses.
    pub policy_entropy: f64,
    pub mean_response_len: f64,
    /// Mean decision entropy over the parseable responses; null when none parse.
    pub mean_cde: Option<f64>,
}

/// Append-only JSON-lines writer; every record is flushed before returning.
pub struct RunLogWriter {
    file: File,
    path: PathBuf,
}

impl RunLogWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { file, path: path.to_path_buf() })
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_run_log(path: &Path) -> Result<Vec<StepRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyRatio {
    pub expo_mean: f64,
    pub baseline_mean: f64,
    /// `expo_mean / baseline_mean`.
    pub ratio: f64,
}

/// Ratio of mean per-step policy entropy between two runs.
pub fn entropy_ratio(expo: &[StepRecord], baseline: &[StepRecord]) -> Result<EntropyRatio> {
    let mean = |log: &[StepRecord]| -> Result<f64> {
        if log.is_empty() {
            return Err(Error::invalid("empty run log"));
        }
        Ok(log.iter().map(|r| r.policy_entropy).sum::<f64>() / log.len() as f64)
    };
    let (e, b) = (mean(expo)?, mean(baseline)?);
    if b <= 0.0 {
        return Err(Error::Estimation(format!("baseline policy entropy {b} is not positive")));
    }
    Ok(EntropyRatio { expo_mean: e, baseline_mean: b, ratio: e / b })
}
