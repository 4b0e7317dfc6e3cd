//! Token vocabulary with the special tokens of the think-then-answer template.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Largest vocabulary the policy supports.
pub const MAX_VOCAB: usize = 256;

/// Index of a token in a [`Vocab`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u16);

impl TokenId {
    #[inline]
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Names of the special tokens a vocabulary must contain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialNames {
    pub pad: String,
    pub eos: String,
    pub think_open: String,
    pub think_close: String,
    pub answer_open: String,
    pub answer_close: String,
    pub sep: String,
}

impl Default for SpecialNames {
    fn default() -> Self {
        Self {
            pad: "<pad>".into(),
            eos: "<eos>".into(),
            think_open: "<think>".into(),
            think_close: "</think>".into(),
            answer_open: "<answer>".into(),
            answer_close: "</answer>".into(),
            sep: "<sep>".into(),
        }
    }
}

impl SpecialNames {
    pub fn all(&self) -> [&str; 7] {
        [
            &self.pad,
            &self.eos,
            &self.think_open,
            &self.think_close,
            &self.answer_open,
            &self.answer_close,
            &self.sep,
        ]
    }
}

/// Resolved special token indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Specials {
    pub pad: TokenId,
    pub eos: TokenId,
    pub think_open: TokenId,
    pub think_close: TokenId,
    pub answer_open: TokenId,
    pub answer_close: TokenId,
    pub sep: TokenId,
}

impl Specials {
    pub fn all(&self) -> [TokenId; 7] {
        [
            self.pad,
            self.eos,
            self.think_open,
            self.think_close,
            self.answer_open,
            self.answer_close,
            self.sep,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    specials: Specials,
    decision: Vec<TokenId>,
}

impl Vocab {
    /// Builds a vocabulary. Tokens must be distinct, every special name must be
    /// present, and decision tokens must not overlap the specials.
    pub fn new(tokens: Vec<String>, specials: &SpecialNames, decision: &[&str]) -> Result<Self> {
        if tokens.len() > MAX_VOCAB {
            return Err(Error::invalid(format!(
                "vocabulary has {} tokens, limit is {MAX_VOCAB}",
                tokens.len()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), TokenId(i as u16)).is_some() {
                return Err(Error::invalid(format!("duplicate token {t:?}")));
            }
        }
        let look = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::invalid(format!("special token {name:?} missing")))
        };
        let specials = Specials {
            pad: look(&specials.pad)?,
            eos: look(&specials.eos)?,
            think_open: look(&specials.think_open)?,
            think_close: look(&specials.think_close)?,
            answer_open: look(&specials.answer_open)?,
            answer_close: look(&specials.answer_close)?,
            sep: look(&specials.sep)?,
        };
        let mut dec = Vec::with_capacity(decision.len());
        for d in decision {
            let id = look(d)?;
            if specials.all().contains(&id) {
                return Err(Error::invalid(format!("decision token {d:?} is special")));
            }
            dec.push(id);
        }
        Ok(Self { tokens, index, specials, decision: dec })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn specials(&self) -> &Specials {
        &self.specials
    }

    pub fn decision_tokens(&self) -> &[TokenId] {
        &self.decision
    }

    pub fn is_decision(&self, t: TokenId) -> bool {
        self.decision.contains(&t)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Like [`Vocab::id`] but errors on unknown tokens.
    pub fn require(&self, token: &str) -> Result<TokenId> {
        self.id(token)
            .ok_or_else(|| Error::invalid(format!("unknown token {token:?}")))
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id.idx()]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<TokenId>> {
        words.iter().map(|w| self.require(w.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn render(&self, ids: &[TokenId]) -> String {
        self.decode(ids).join(" ")
    }

    /// SHA-256 over the length-prefixed token strings in order.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.tokens.len() as u64).to_le_bytes());
        for t in &self.tokens {
            h.update((t.len() as u64).to_le_bytes());
            h.update(t.as_bytes());
        }
        let out = h.finalize();
        let mut d = [0u8; 32];
        d.copy_from_slice(&out);
        d
    }

    pub fn check(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|t| t.idx() >= self.len()) {
            Some(t) => Err(Error::invalid(format!(
                "token {t} out of range for vocabulary of size {}",
                self.len()
            ))),
            None => Ok(()),
        }
    }
}
