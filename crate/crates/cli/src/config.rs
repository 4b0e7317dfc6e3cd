//! Run configuration: JSON file, then dotted `--set` overrides, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use expo_core::curriculum::{PipelineConfig, TrainMethod, TrainRunConfig};
use expo_core::eval::{EvalConfig, JudgeConfig};
use expo_core::policy::PolicyConfig;
use expo_core::rng::derive_seed;
use expo_core::task::DatasetConfig;

pub const OUT_ENV: &str = "EXPO_OUT_DIR";
const DEFAULT_OUT: &str = "expo_out";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed; dataset, policy-init and training seeds are derived from it.
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    /// Existing corpus to use instead of generating one.
    pub corpus: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub policy: PolicyConfig,
    pub train: TrainRunConfig,
    pub eval: EvalConfig,
    pub judge: JudgeConfig,
    pub eval_steps: Vec<usize>,
    pub grid_seeds: Vec<u64>,
    /// Longest explanation walked by the exact estimator.
    pub exact_max_explanation_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: None,
            corpus: None,
            dataset: DatasetConfig::default(),
            policy: PolicyConfig::default(),
            train: TrainRunConfig::default(),
            eval: EvalConfig::default(),
            judge: JudgeConfig::default(),
            eval_steps: Vec::new(),
            grid_seeds: vec![0, 1, 2],
            exact_max_explanation_len: 1,
        }
    }
}

/// Overrides gathered from the command line.
#[derive(Debug, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub sets: Vec<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

fn check_keys(user: &Value, known: &Value, prefix: &str) -> Result<()> {
    if let (Value::Object(u), Value::Object(k)) = (user, known) {
        for (key, v) in u {
            let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
            let Some(kv) = k.get(key) else { bail!("unknown configuration key `{path}`") };
            check_keys(v, kv, &path)?;
        }
    }
    Ok(())
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn apply_set(root: &mut Value, known: &Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| anyhow!("--set expects key=value, got `{assignment}`"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut known = known;
    let mut slot = root;
    for part in key.split('.') {
        known = known.get(part).ok_or_else(|| anyhow!("unknown configuration key `{key}`"))?;
        slot = slot
            .as_object_mut()
            .ok_or_else(|| anyhow!("`{key}` does not name a nested key"))?
            .entry(part.to_string())
            .or_insert(Value::Null);
    }
    *slot = value;
    Ok(())
}

impl RunConfig {
    /// Defaults, then the config file, then `--set`, then `--seed`/`--out`.
    pub fn load(o: &Overrides) -> Result<Self> {
        let known = serde_json::to_value(RunConfig::default())?;
        let mut root = known.clone();
        if let Some(path) = &o.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let user: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            check_keys(&user, &known, "")?;
            merge(&mut root, user);
        }
        for s in &o.sets {
            apply_set(&mut root, &known, s)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(root).context("configuration does not match the schema")?;
        if let Some(seed) = o.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &o.out {
            cfg.out_dir = Some(out.clone());
        }
        cfg.derive_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    fn derive_seeds(&mut self) {
        self.dataset.seed = derive_seed(self.seed, "dataset", &[]);
        self.policy.seed = derive_seed(self.seed, "policy-init", &[]);
        self.train.seed = derive_seed(self.seed, "train", &[]);
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.pipeline(TrainMethod::Expo).validate()?;
        if self.grid_seeds.is_empty() {
            bail!("grid_seeds must not be empty");
        }
        if let Some(p) = &self.corpus {
            if !p.is_file() {
                bail!("corpus path {} does not exist", p.display());
            }
        }
        if self.eval.use_external_judge && self.judge.endpoint.is_none() {
            bail!("eval.use_external_judge requires judge.endpoint");
        }
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn pipeline(&self, method: TrainMethod) -> PipelineConfig {
        PipelineConfig {
            method,
            policy: self.policy.clone(),
            train: self.train.clone(),
            eval: self.eval_config(),
            eval_steps: self.eval_steps.clone(),
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig { judge: self.judge.clone(), ..self.eval.clone() }
    }

    /// SHA-256 of the resolved configuration, excluding the output directory.
    pub fn digest(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = None;
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&c)?)))
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
