use serde::{Deserialize, Serialize};

use super::{Example, TaskKind, TaskVocab, ATTACK_DESCRIPTIONS, BINARY_DESCRIPTIONS, TARGET_DESCRIPTIONS};
use crate::error::{Error, Result};
use crate::vocab::TokenId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Plain,
    PolicyManual,
}

/// Label inventory of one task with a short description per label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PolicyManual {
    pub task: TaskKind,
    pub preamble: Vec<TokenId>,
    pub items: Vec<(TokenId, Vec<TokenId>)>,
    pub fallback: Vec<TokenId>,
}

impl PolicyManual {
    pub fn standard(task: TaskKind, tv: &TaskVocab) -> Self {
        let descs: &[&[&str]] = match task {
            TaskKind::Binary => &BINARY_DESCRIPTIONS,
            TaskKind::Attack => &ATTACK_DESCRIPTIONS,
            TaskKind::Target => &TARGET_DESCRIPTIONS,
        };
        let v = tv.vocab();
        let items = tv
            .inventory(task)
            .into_iter()
            .zip(descs)
            .map(|(l, d)| (l, v.encode(d).expect("description words are in the vocabulary")))
            .collect();
        Self { task, preamble: vec![tv.question(task)], items, fallback: tv.fallback(task).to_vec() }
    }

    pub fn validate(&self, tv: &TaskVocab) -> Result<()> {
        let labels: Vec<TokenId> = self.items.iter().map(|(l, _)| *l).collect();
        if labels != tv.inventory(self.task) {
            return Err(Error::config(format!("manual items do not match the {} inventory", self.task.name())));
        }
        if self.items.iter().any(|(_, d)| d.is_empty()) {
            return Err(Error::config("manual descriptions must be non-empty"));
        }
        Ok(())
    }
}

pub(crate) fn plain_prompt(task: TaskKind, surface: &[TokenId], tv: &TaskVocab) -> Vec<TokenId> {
    let mut out = vec![tv.question(task)];
    out.extend(tv.inventory(task));
    out.extend_from_slice(surface);
    out.extend(tv.fallback(task));
    out
}

/// Prompt for `example`. Both modes end with the label inventory, the meme
/// surface and the fallback instruction. The policy-manual mode puts the
/// question and a `label : description` entry per label in front, so the tail
/// seen by a short context window is the same in both modes.
pub fn build_prompt(example: &Example, mode: PromptMode, manual: &PolicyManual, tv: &TaskVocab) -> Result<Vec<TokenId>> {
    if manual.task != example.task {
        return Err(Error::config(format!(
            "manual for {} task used on {} example",
            manual.task.name(),
            example.task.name()
        )));
    }
    match mode {
        PromptMode::Plain => Ok(plain_prompt(example.task, &example.surface, tv)),
        PromptMode::PolicyManual => {
            manual.validate(tv)?;
            let mut out = manual.preamble.clone();
            for (label, desc) in &manual.items {
                out.push(*label);
                out.push(tv.colon);
                out.extend_from_slice(desc);
            }
            out.extend(tv.inventory(example.task));
            out.extend_from_slice(&example.surface);
            out.extend_from_slice(&manual.fallback);
            Ok(out)
        }
    }
}
