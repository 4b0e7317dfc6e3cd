//! Synthetic moderation task: latent memes, noisy token surfaces, prompts and
//! the think/answer response template.

mod corpus;
mod prompt;
mod template;

pub use corpus::{
    generate_dataset, read_corpus, render_surface, write_corpus, BinaryClass, DatasetConfig, Example, LatentMeme, Split,
    MAX_CUES,
};
pub use prompt::{build_prompt, PolicyManual, PromptMode};
pub use template::{gold_explanation, parse_response, render_target, FormatError, Parsed};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::vocab::{SpecialNames, TokenId, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Binary,
    Attack,
    Target,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Binary, TaskKind::Attack, TaskKind::Target];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Binary => "binary",
            TaskKind::Attack => "attack",
            TaskKind::Target => "target",
        }
    }

    pub fn is_fine_grained(self) -> bool {
        self != TaskKind::Binary
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attack {
    Dehumanizing,
    Mocking,
    Slurs,
    Exclusion,
}

impl Attack {
    pub const ALL: [Attack; 4] = [Attack::Dehumanizing, Attack::Mocking, Attack::Slurs, Attack::Exclusion];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Religion,
    Race,
    Sex,
    Nationality,
    Disability,
}

impl Target {
    pub const ALL: [Target; 5] = [Target::Religion, Target::Race, Target::Sex, Target::Nationality, Target::Disability];
}

const ATTACK_LABELS: [&str; 4] = ["Dehumanizing", "Mocking", "Slurs", "Exclusion"];
const TARGET_LABELS: [&str; 5] = ["Religion", "Race", "Sex", "Nationality", "Disability"];
const ATTACK_CUES: [&str; 4] = ["cue_dehumanizing", "cue_mocking", "cue_slurs", "cue_exclusion"];
const TARGET_CUES: [&str; 5] = ["cue_religion", "cue_race", "cue_sex", "cue_nationality", "cue_disability"];
const FILLERS: usize = 12;

const QUESTIONS: [&str; 3] = ["q_binary", "q_attack", "q_target"];
const FALLBACK: [[&str; 2]; 3] = [
    ["if_not_hateful", "respond_no"],
    ["if_no_attack", "respond_benign"],
    ["if_no_target", "respond_benign"],
];

pub(crate) const ATTACK_DESCRIPTIONS: [&[&str]; 4] = [
    &["presenting", "group", "subhuman", "explicitly", "implicitly"],
    &["belittling", "jokes", "group"],
    &["prejudicial", "derogatory", "terms", "group"],
    &["removal", "segregation", "marginalization", "group"],
];
pub(crate) const TARGET_DESCRIPTIONS: [&[&str]; 5] = [
    &["group", "shared", "belief", "systems"],
    &["group", "racialized", "physical", "characteristics"],
    &["group", "sexual", "attributes", "identification"],
    &["group", "country", "region", "origin"],
    &["group", "conditions", "permanent", "dependencies"],
];
pub(crate) const BINARY_DESCRIPTIONS: [&[&str]; 2] = [&["hateful", "content"], &["not", "hateful"]];

const OTHER_WORDS: [&str; 25] = [
    "[IMG]",
    "[TXT]",
    ":",
    "presenting",
    "group",
    "subhuman",
    "explicitly",
    "implicitly",
    "belittling",
    "jokes",
    "prejudicial",
    "derogatory",
    "terms",
    "removal",
    "segregation",
    "marginalization",
    "shared",
    "belief",
    "systems",
    "racialized",
    "physical",
    "characteristics",
    "sexual",
    "attributes",
    "identification",
];
const MORE_WORDS: [&str; 12] = [
    "country",
    "region",
    "origin",
    "conditions",
    "permanent",
    "dependencies",
    "hateful",
    "content",
    "not",
    "targets",
    "via",
    "violation",
];

/// The standard task vocabulary with resolved ids for every role a token plays.
#[derive(Clone, Debug)]
pub struct TaskVocab {
    vocab: Vocab,
    pub attack_labels: [TokenId; 4],
    pub target_labels: [TokenId; 5],
    pub attack_cues: [TokenId; 4],
    pub target_cues: [TokenId; 5],
    pub benign: TokenId,
    pub yes: TokenId,
    pub no: TokenId,
    pub fillers: Vec<TokenId>,
    pub img: TokenId,
    pub txt: TokenId,
    pub colon: TokenId,
    pub questions: [TokenId; 3],
    pub fallbacks: [[TokenId; 2]; 3],
    pub word_targets: TokenId,
    pub word_via: TokenId,
    pub word_no: TokenId,
    pub word_violation: TokenId,
}

impl TaskVocab {
    pub fn standard() -> Self {
        let names = SpecialNames::default();
        let mut tokens: Vec<String> = names.all().iter().map(|s| s.to_string()).collect();
        tokens.extend(ATTACK_LABELS.iter().chain(&TARGET_LABELS).map(|s| s.to_string()));
        tokens.extend(["Benign", "Yes", "No"].map(String::from));
        tokens.extend(ATTACK_CUES.iter().chain(&TARGET_CUES).map(|s| s.to_string()));
        tokens.extend((0..FILLERS).map(|i| format!("w{i:02}")));
        tokens.extend(QUESTIONS.iter().map(|s| s.to_string()));
        tokens.extend(["if_not_hateful", "if_no_attack", "if_no_target", "respond_no", "respond_benign"].map(String::from));
        tokens.extend(OTHER_WORDS.iter().chain(&MORE_WORDS).map(|s| s.to_string()));
        tokens.push("no".into());
        let mut decision: Vec<&str> = ATTACK_LABELS.to_vec();
        decision.extend(TARGET_LABELS);
        decision.extend(["Benign", "Yes", "No"]);
        let vocab = Vocab::new(tokens, &names, &decision).expect("standard vocabulary is valid");
        Self::resolve(vocab).expect("standard vocabulary resolves")
    }

    fn resolve(vocab: Vocab) -> Result<Self> {
        let id = |s: &str| vocab.require(s);
        let arr4 = |xs: [&str; 4]| -> Result<[TokenId; 4]> { Ok([id(xs[0])?, id(xs[1])?, id(xs[2])?, id(xs[3])?]) };
        let arr5 = |xs: [&str; 5]| -> Result<[TokenId; 5]> {
            Ok([id(xs[0])?, id(xs[1])?, id(xs[2])?, id(xs[3])?, id(xs[4])?])
        };
        let fb = |k: usize| -> Result<[TokenId; 2]> { Ok([id(FALLBACK[k][0])?, id(FALLBACK[k][1])?]) };
        Ok(Self {
            attack_labels: arr4(ATTACK_LABELS)?,
            target_labels: arr5(TARGET_LABELS)?,
            attack_cues: arr4(ATTACK_CUES)?,
            target_cues: arr5(TARGET_CUES)?,
            benign: id("Benign")?,
            yes: id("Yes")?,
            no: id("No")?,
            fillers: (0..FILLERS).map(|i| id(&format!("w{i:02}"))).collect::<Result<_>>()?,
            img: id("[IMG]")?,
            txt: id("[TXT]")?,
            colon: id(":")?,
            questions: [id(QUESTIONS[0])?, id(QUESTIONS[1])?, id(QUESTIONS[2])?],
            fallbacks: [fb(0)?, fb(1)?, fb(2)?],
            word_targets: id("targets")?,
            word_via: id("via")?,
            word_no: id("no")?,
            word_violation: id("violation")?,
            vocab,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Labels of a task in canonical order (without the Benign fallback).
    pub fn inventory(&self, task: TaskKind) -> Vec<TokenId> {
        match task {
            TaskKind::Binary => vec![self.yes, self.no],
            TaskKind::Attack => self.attack_labels.to_vec(),
            TaskKind::Target => self.target_labels.to_vec(),
        }
    }

    /// Every token that may appear inside an answer for `task`, in canonical order.
    pub fn answer_labels(&self, task: TaskKind) -> Vec<TokenId> {
        let mut v = self.inventory(task);
        if task.is_fine_grained() {
            v.push(self.benign);
        }
        v
    }

    pub fn question(&self, task: TaskKind) -> TokenId {
        self.questions[task.index()]
    }

    pub fn fallback(&self, task: TaskKind) -> [TokenId; 2] {
        self.fallbacks[task.index()]
    }

    pub fn attack_label(&self, a: Attack) -> TokenId {
        self.attack_labels[a as usize]
    }

    pub fn target_label(&self, t: Target) -> TokenId {
        self.target_labels[t as usize]
    }

    pub fn attack_cue(&self, a: Attack) -> TokenId {
        self.attack_cues[a as usize]
    }

    pub fn target_cue(&self, t: Target) -> TokenId {
        self.target_cues[t as usize]
    }

    pub fn is_cue(&self, t: TokenId) -> bool {
        self.attack_cues.contains(&t) || self.target_cues.contains(&t)
    }

    pub fn all_cues(&self) -> Vec<TokenId> {
        self.target_cues.iter().chain(&self.attack_cues).copied().collect()
    }

    /// Canonical rank of a label within its task's answer inventory.
    pub(crate) fn rank(&self, task: TaskKind, t: TokenId) -> Option<usize> {
        self.answer_labels(task).iter().position(|&x| x == t)
    }
}

impl Default for TaskVocab {
    fn default() -> Self {
        Self::standard()
    }
}
