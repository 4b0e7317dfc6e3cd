//! Fixed-window autoregressive token policy.
//!
//! The next-token distribution at position `p` is
//! `softmax(W2ᵀ · tanh(W1 · [E[s_{p-C}]; …; E[s_{p-1}]] + b1))`, with positions
//! before the start of the sequence filled by the padding token.
//!
//! Parameters live in one flat buffer laid out as
//! `embedding (V × d) | W1 (H × C·d) | b1 (H) | W2 (H × V)`, all row-major.
//! That order is also the on-disk order of checkpoints.

mod backward;
mod checkpoint;
mod forward;
mod sample;

pub use backward::{accumulate_weighted_grad, grad_sequence_log_prob, GradAccumulator};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{
    decision_distribution, mean_token_entropy, next_token_log_probs, sequence_log_prob,
    token_log_probs, DecisionDistribution,
};
pub use sample::{sample_response, sample_token};
pub(crate) use sample::sample_until;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::vocab::{TokenId, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub d_emb: usize,
    pub hidden: usize,
    /// Number of preceding tokens the policy conditions on.
    pub context: usize,
    pub init_scale: f64,
    pub seed: u64,
    /// Upper bound on `|x| + |y|` for scoring calls.
    pub max_seq_len: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { d_emb: 32, hidden: 64, context: 16, init_scale: 0.08, seed: 0, max_seq_len: 512 }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_emb == 0 || self.hidden == 0 {
            return Err(Error::config("d_emb and hidden must be positive"));
        }
        if self.context < 4 {
            return Err(Error::config(format!("context window {} < 4", self.context)));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::config("init_scale must be positive"));
        }
        if self.max_seq_len == 0 {
            return Err(Error::config("max_seq_len must be positive"));
        }
        Ok(())
    }
}

/// Vocabulary facts the policy needs: size, padding and end-of-sequence ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub vocab_size: usize,
    pub pad: TokenId,
    pub eos: TokenId,
}

impl TokenLayout {
    pub fn of(vocab: &Vocab) -> Self {
        Self { vocab_size: vocab.len(), pad: vocab.specials().pad, eos: vocab.specials().eos }
    }
}

/// Offsets of each parameter block inside the flat buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub vocab: usize,
    pub d: usize,
    pub h: usize,
    pub c: usize,
    pub emb: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub len: usize,
}

impl Layout {
    pub fn new(vocab: usize, cfg: &PolicyConfig) -> Self {
        let (d, h, c) = (cfg.d_emb, cfg.hidden, cfg.context);
        let emb = 0;
        let w1 = emb + vocab * d;
        let b1 = w1 + h * c * d;
        let w2 = b1 + h;
        let len = w2 + h * vocab;
        Self { vocab, d, h, c, emb, w1, b1, w2, len }
    }

    /// Name of the block containing flat index `i`.
    pub fn block_of(&self, i: usize) -> &'static str {
        if i < self.w1 {
            "embedding"
        } else if i < self.b1 {
            "hidden weights"
        } else if i < self.w2 {
            "hidden bias"
        } else {
            "output projection"
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams<S> {
    config: PolicyConfig,
    tokens: TokenLayout,
    layout: Layout,
    data: Vec<S>,
}

impl<S: Scalar> PolicyParams<S> {
    /// Seeded uniform initialisation in `[-init_scale, init_scale]`.
    pub fn init(config: PolicyConfig, tokens: TokenLayout) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(tokens.vocab_size, &config);
        let mut r = rng::stream(config.seed, "policy-init", &[]);
        let s = config.init_scale;
        let data = (0..layout.len).map(|_| S::of(r.random_range(-s..=s))).collect();
        Ok(Self { config, tokens, layout, data })
    }

    pub fn for_vocab(config: PolicyConfig, vocab: &Vocab) -> Result<Self> {
        Self::init(config, TokenLayout::of(vocab))
    }

    pub fn zeros(config: PolicyConfig, tokens: TokenLayout) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(tokens.vocab_size, &config);
        Ok(Self { config, tokens, layout, data: vec![S::zero(); layout.len] })
    }

    pub fn from_flat(config: PolicyConfig, tokens: TokenLayout, data: Vec<S>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(tokens.vocab_size, &config);
        if data.len() != layout.len {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                layout.len,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric { layer: layout.block_of(i) });
        }
        Ok(Self { config, tokens, layout, data })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn tokens(&self) -> TokenLayout {
        self.tokens
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.vocab_size
    }

    pub fn param_count(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn embedding(&self) -> &[S] {
        &self.data[self.layout.emb..self.layout.w1]
    }

    pub fn w1(&self) -> &[S] {
        &self.data[self.layout.w1..self.layout.b1]
    }

    pub fn b1(&self) -> &[S] {
        &self.data[self.layout.b1..self.layout.w2]
    }

    pub fn w2(&self) -> &[S] {
        &self.data[self.layout.w2..]
    }

    pub fn b1_mut(&mut self) -> &mut [S] {
        let (a, b) = (self.layout.b1, self.layout.w2);
        &mut self.data[a..b]
    }

    pub fn w2_mut(&mut self) -> &mut [S] {
        let a = self.layout.w2;
        &mut self.data[a..]
    }

    pub fn embedding_mut(&mut self) -> &mut [S] {
        let (a, b) = (self.layout.emb, self.layout.w1);
        &mut self.data[a..b]
    }

    pub fn w1_mut(&mut self) -> &mut [S] {
        let (a, b) = (self.layout.w1, self.layout.b1);
        &mut self.data[a..b]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Content digest over configuration, layout and parameter bits.
    pub fn digest(&self) -> SnapshotId {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serialises"));
        h.update((self.tokens.vocab_size as u64).to_le_bytes());
        for x in &self.data {
            h.update(x.as_f64().to_bits().to_le_bytes());
        }
        let out = h.finalize();
        let mut b = [0u8; 8];
        b.copy_from_slice(&out[..8]);
        SnapshotId(u64::from_le_bytes(b))
    }

    pub fn check_tokens(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|t| t.idx() >= self.tokens.vocab_size) {
            Some(t) => Err(Error::invalid(format!(
                "token {t} out of range for vocabulary of size {}",
                self.tokens.vocab_size
            ))),
            None => Ok(()),
        }
    }

    /// Converts to another scalar type (exact for f32 → f64 → f32 round trips).
    pub fn cast<T: Scalar>(&self) -> PolicyParams<T> {
        PolicyParams {
            config: self.config.clone(),
            tokens: self.tokens,
            layout: self.layout,
            data: self.data.iter().map(|x| T::of(x.as_f64())).collect(),
        }
    }
}

/// Identifier of a frozen parameter snapshot (content hash).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SnapshotId(pub u64);

/// Frozen parameters plus the per-slot projection table used by every forward pass.
///
/// `table[(j·V + t)·H + h] = Σ_k W1[h, j·d + k] · E[t, k]`, so the hidden
/// pre-activation of a window is `b1 + Σ_j table[j, w_j, ·]`.
#[derive(Clone, Debug)]
pub struct Snapshot<S> {
    params: PolicyParams<S>,
    table: Vec<S>,
    id: SnapshotId,
}

impl<S: Scalar> Snapshot<S> {
    pub fn new(params: PolicyParams<S>) -> Self {
        let l = *params.layout();
        let emb = params.embedding();
        let w1 = params.w1();
        let cd = l.c * l.d;
        let mut table = vec![S::zero(); l.c * l.vocab * l.h];
        for j in 0..l.c {
            for t in 0..l.vocab {
                let e = &emb[t * l.d..(t + 1) * l.d];
                let out = &mut table[(j * l.vocab + t) * l.h..(j * l.vocab + t + 1) * l.h];
                for (h, o) in out.iter_mut().enumerate() {
                    let row = &w1[h * cd + j * l.d..h * cd + (j + 1) * l.d];
                    *o = row.iter().zip(e).map(|(&a, &b)| a * b).sum();
                }
            }
        }
        let id = params.digest();
        Self { params, table, id }
    }

    pub fn id(&self) -> SnapshotId {
        self.id
    }

    pub fn params(&self) -> &PolicyParams<S> {
        &self.params
    }

    pub fn into_params(self) -> PolicyParams<S> {
        self.params
    }

    pub(crate) fn table(&self) -> &[S] {
        &self.table
    }
}

/// Gradient buffer aligned with [`PolicyParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient<S> {
    pub data: Vec<S>,
}

impl<S: Scalar> Gradient<S> {
    pub fn zeros_like(p: &PolicyParams<S>) -> Self {
        Self { data: vec![S::zero(); p.param_count()] }
    }

    pub fn add_assign(&mut self, other: &Gradient<S>) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale(&mut self, k: S) {
        for a in self.data.iter_mut() {
            *a = *a * k;
        }
    }

    pub fn norm(&self) -> S {
        self.data.iter().map(|&x| x * x).sum::<S>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == S::zero())
    }
}

/// A token sequence with the prompt/response boundary.
///
/// Positions `< response_start` are prompt, the rest is response; the response
/// region is therefore always contiguous and terminal.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<TokenId>,
    pub response_start: usize,
}

impl TokenSeq {
    pub fn prompt(tokens: Vec<TokenId>) -> Self {
        let n = tokens.len();
        Self { tokens, response_start: n }
    }

    pub fn response(tokens: Vec<TokenId>) -> Self {
        Self { tokens, response_start: 0 }
    }

    /// Joins a prompt and a response.
    pub fn join(x: &[TokenId], y: &[TokenId]) -> Self {
        let mut tokens = Vec::with_capacity(x.len() + y.len());
        tokens.extend_from_slice(x);
        tokens.extend_from_slice(y);
        Self { tokens, response_start: x.len() }
    }

    pub fn prompt_part(&self) -> &[TokenId] {
        &self.tokens[..self.response_start]
    }

    pub fn response_part(&self) -> &[TokenId] {
        &self.tokens[self.response_start..]
    }

    pub fn is_response(&self, pos: usize) -> bool {
        pos >= self.response_start
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}
