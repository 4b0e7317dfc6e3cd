use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::prompt::plain_prompt;
use super::template::gold_explanation;
use super::{Attack, TaskKind, TaskVocab, Target};
use crate::error::{Error, Result};
use crate::rng;
use crate::vocab::TokenId;

/// Largest number of cue tokens one surface can carry (target, four attacks, distractor).
pub const MAX_CUES: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub p_hateful: f64,
    pub cue_flip_noise: f64,
    pub surface_length: usize,
    /// Probability that each non-primary attack co-occurs on a hateful meme.
    pub p_extra_attack: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_train: 3000,
            n_val: 200,
            n_test: 200,
            p_hateful: 0.5,
            cue_flip_noise: 0.1,
            surface_length: 8,
            p_extra_attack: 0.2,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::config("dataset split sizes must be positive"));
        }
        if !(self.p_hateful > 0.0 && self.p_hateful < 1.0) {
            return Err(Error::config(format!("p_hateful {} outside (0, 1)", self.p_hateful)));
        }
        if !(0.0..0.5).contains(&self.cue_flip_noise) {
            return Err(Error::config(format!("cue_flip_noise {} outside [0, 0.5)", self.cue_flip_noise)));
        }
        if !(0.0..=1.0).contains(&self.p_extra_attack) {
            return Err(Error::config("p_extra_attack outside [0, 1]"));
        }
        if self.surface_length < MAX_CUES {
            return Err(Error::config(format!(
                "surface_length {} cannot hold {MAX_CUES} cues",
                self.surface_length
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentMeme {
    pub target: Option<Target>,
    /// Sorted canonically; empty iff `target` is `None`.
    pub attacks: Vec<Attack>,
    pub noise_seed: u64,
}

impl LatentMeme {
    pub fn benign(noise_seed: u64) -> Self {
        Self { target: None, attacks: Vec::new(), noise_seed }
    }

    pub fn hateful(target: Target, mut attacks: Vec<Attack>, noise_seed: u64) -> Result<Self> {
        attacks.sort();
        attacks.dedup();
        if attacks.is_empty() {
            return Err(Error::invalid("hateful meme needs at least one attack"));
        }
        Ok(Self { target: Some(target), attacks, noise_seed })
    }

    pub fn is_hateful(&self) -> bool {
        !self.attacks.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.target.is_none() != self.attacks.is_empty() {
            return Err(Error::invalid("target and attacks must be both present or both absent"));
        }
        Ok(())
    }

    /// Cue tokens implied by the latent attributes, target first.
    pub fn true_cues(&self, tv: &TaskVocab) -> Vec<TokenId> {
        let mut v: Vec<TokenId> = self.target.iter().map(|&t| tv.target_cue(t)).collect();
        v.extend(self.attacks.iter().map(|&a| tv.attack_cue(a)));
        v
    }

    pub fn gold_labels(&self, task: TaskKind, tv: &TaskVocab) -> Vec<TokenId> {
        match (task, self.target) {
            (TaskKind::Binary, Some(_)) => vec![tv.yes],
            (TaskKind::Binary, None) => vec![tv.no],
            (TaskKind::Attack, Some(_)) => self.attacks.iter().map(|&a| tv.attack_label(a)).collect(),
            (TaskKind::Target, Some(t)) => vec![tv.target_label(t)],
            (_, None) => vec![tv.benign],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinaryClass {
    Benign,
    Hateful,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub id: u64,
    pub task: TaskKind,
    /// Meme surrogate: `[IMG] slots [TXT] slots`.
    pub surface: Vec<TokenId>,
    /// Plain prompt built around the surface.
    pub input: Vec<TokenId>,
    pub gold_binary: BinaryClass,
    /// Canonical order.
    pub gold_labels: Vec<TokenId>,
    pub gold_explanation: Vec<TokenId>,
    pub split: Split,
}

impl Example {
    pub fn is_hateful(&self) -> bool {
        self.gold_binary == BinaryClass::Hateful
    }
}

fn sample_latent<R: Rng>(cfg: &DatasetConfig, r: &mut R, noise_seed: u64) -> LatentMeme {
    if r.random::<f64>() >= cfg.p_hateful {
        return LatentMeme::benign(noise_seed);
    }
    let target = Target::ALL[r.random_range(0..Target::ALL.len())];
    let primary = r.random_range(0..Attack::ALL.len());
    let attacks = Attack::ALL
        .iter()
        .enumerate()
        .filter(|&(i, _)| i == primary || r.random::<f64>() < cfg.p_extra_attack)
        .map(|(_, &a)| a)
        .collect();
    LatentMeme::hateful(target, attacks, noise_seed).expect("primary attack present")
}

/// Noisy surface: each true cue survives with probability `1 - noise`, one
/// distractor cue is inserted with probability `noise`, the rest is filler.
pub fn render_surface(latent: &LatentMeme, cfg: &DatasetConfig, tv: &TaskVocab) -> Vec<TokenId> {
    let mut r = rng::stream(latent.noise_seed, "surface", &[]);
    let truth = latent.true_cues(tv);
    let mut cues: Vec<TokenId> = truth.iter().copied().filter(|_| r.random::<f64>() >= cfg.cue_flip_noise).collect();
    if r.random::<f64>() < cfg.cue_flip_noise {
        let pool: Vec<TokenId> = tv.all_cues().into_iter().filter(|c| !truth.contains(c)).collect();
        cues.push(pool[r.random_range(0..pool.len())]);
    }
    let n = cfg.surface_length;
    let mut slots: Vec<TokenId> = (0..n).map(|_| tv.fillers[r.random_range(0..tv.fillers.len())]).collect();
    let mut positions: Vec<usize> = (0..n).collect();
    positions.shuffle(&mut r);
    for (c, &p) in cues.iter().zip(&positions) {
        slots[p] = *c;
    }
    let half = n.div_ceil(2);
    let mut out = Vec::with_capacity(n + 2);
    out.push(tv.img);
    out.extend_from_slice(&slots[..half]);
    out.push(tv.txt);
    out.extend_from_slice(&slots[half..]);
    out
}

/// Deterministic corpus: one example per task for every latent meme, ids
/// `3·i + task`, latents `0..n_train` train, then validation, then test.
pub fn generate_dataset(cfg: &DatasetConfig, tv: &TaskVocab) -> Result<Vec<Example>> {
    cfg.validate()?;
    let total = cfg.n_train + cfg.n_val + cfg.n_test;
    let mut out = Vec::with_capacity(3 * total);
    for i in 0..total {
        let mut r = rng::stream(cfg.seed, "latent", &[i as u64]);
        let latent = sample_latent(cfg, &mut r, rng::derive_seed(cfg.seed, "noise", &[i as u64]));
        let split = if i < cfg.n_train {
            Split::Train
        } else if i < cfg.n_train + cfg.n_val {
            Split::Validation
        } else {
            Split::Test
        };
        let surface = render_surface(&latent, cfg, tv);
        let explanation = gold_explanation(&latent, tv);
        for (k, task) in TaskKind::ALL.into_iter().enumerate() {
            out.push(Example {
                id: 3 * i as u64 + k as u64,
                task,
                input: plain_prompt(task, &surface, tv),
                surface: surface.clone(),
                gold_binary: if latent.is_hateful() { BinaryClass::Hateful } else { BinaryClass::Benign },
                gold_labels: latent.gold_labels(task, tv),
                gold_explanation: explanation.clone(),
                split,
            });
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: u64,
    task: TaskKind,
    input_tokens: Vec<String>,
    gold_binary: BinaryClass,
    gold_labels: Vec<String>,
    gold_explanation: Vec<String>,
    split: Split,
}

pub fn write_corpus(examples: &[Example], tv: &TaskVocab, path: &Path) -> Result<()> {
    let v = tv.vocab();
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for ex in examples {
        let rec = Record {
            id: ex.id,
            task: ex.task,
            input_tokens: v.decode(&ex.input),
            gold_binary: ex.gold_binary,
            gold_labels: v.decode(&ex.gold_labels),
            gold_explanation: v.decode(&ex.gold_explanation),
            split: ex.split,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path, tv: &TaskVocab) -> Result<Vec<Example>> {
    let v = tv.vocab();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)?;
        let input = v.encode(&rec.input_tokens)?;
        let start = input.iter().position(|&t| t == tv.img);
        let surface = match start {
            Some(s) if input.len() >= s + 2 => input[s..input.len() - 2].to_vec(),
            _ => return Err(Error::invalid(format!("{}:{}: input has no meme surface", path.display(), n + 1))),
        };
        out.push(Example {
            id: rec.id,
            task: rec.task,
            surface,
            input,
            gold_binary: rec.gold_binary,
            gold_labels: v.encode(&rec.gold_labels)?,
            gold_explanation: v.encode(&rec.gold_explanation)?,
            split: rec.split,
        });
    }
    Ok(out)
}
