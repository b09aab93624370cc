//! Language-model backbones that expose the shallow (layer 1) and deep
//! (layer L) hidden states of every decode step together with a frozen LM head.

mod synthetic;
mod transformer;

use thiserror::Error;

use crate::numerics::{dot, Matrix, NumericsError};
use crate::tensorfile::TensorFileError;

pub use synthetic::{SyntheticBranchModel, SyntheticCache, SyntheticConfig};
pub use transformer::{ShallowCapture, TinyTransformer, TransformerCache, DEFAULT_SHALLOW_CAPTURE};

pub type TokenId = usize;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("token {token} is outside the vocabulary of size {vocab}")]
    InvalidToken { token: TokenId, vocab: usize },
    #[error("context of {capacity} positions is full")]
    ContextOverflow { capacity: usize },
    #[error("invalid backbone spec: {0}")]
    Spec(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] TensorFileError),
}

pub type Result<T> = std::result::Result<T, BackboneError>;

/// Shape of a backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BackboneSpec {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_context: usize,
    pub seed: u64,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            hidden: 64,
            layers: 4,
            heads: 2,
            max_context: 256,
            seed: 0,
        }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(BackboneError::Spec(format!(
                "need at least 2 layers, got {}",
                self.layers
            )));
        }
        if self.vocab_size == 0 || self.hidden == 0 || self.max_context == 0 {
            return Err(BackboneError::Spec(
                "vocab, hidden and context must be positive".into(),
            ));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(BackboneError::Spec(format!(
                "hidden width {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Prefill,
    Decode,
}

/// Shallow and deep hidden state of one token position.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenPair {
    pub h1: Vec<f64>,
    pub hl: Vec<f64>,
}

/// Everything one decode step exposes. `logits_ref` is always `head · hl`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub h1: Vec<f64>,
    pub hl: Vec<f64>,
    pub logits_ref: Vec<f64>,
}

/// Frozen, bias-free LM head `W_head` of shape `|V| × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct LmHead {
    weight: Matrix,
}

impl LmHead {
    pub fn new(weight: Matrix) -> Self {
        Self { weight }
    }

    pub fn vocab_size(&self) -> usize {
        self.weight.rows()
    }

    pub fn width(&self) -> usize {
        self.weight.cols()
    }

    /// Row `w_z` of the head.
    pub fn row(&self, z: TokenId) -> &[f64] {
        self.weight.row(z)
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn project(&self, h: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.vocab_size()];
        self.project_into(h, &mut out)?;
        Ok(out)
    }

    pub fn project_into(&self, h: &[f64], out: &mut [f64]) -> Result<()> {
        if h.len() != self.width() || out.len() != self.vocab_size() {
            return Err(BackboneError::Numerics(NumericsError::Shape(format!(
                "lm_head is {}x{}, got hidden {} and output {}",
                self.vocab_size(),
                self.width(),
                h.len(),
                out.len()
            ))));
        }
        for (z, o) in out.iter_mut().enumerate() {
            *o = dot(self.weight.row(z), h);
        }
        Ok(())
    }
}

/// Per-sequence decoding state: backbone cache, token prefix and phase.
#[derive(Debug, Clone)]
pub struct SequenceState<C> {
    pub(crate) cache: C,
    tokens: Vec<TokenId>,
    prompt_len: usize,
    phase: Phase,
    shallow_pending: bool,
}

impl<C> SequenceState<C> {
    pub(crate) fn new(cache: C) -> Self {
        Self {
            cache,
            tokens: Vec::new(),
            prompt_len: 0,
            phase: Phase::Prefill,
            shallow_pending: false,
        }
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn cache(&self) -> &C {
        &self.cache
    }

    /// Number of positions fed through the backbone so far.
    pub fn position(&self) -> usize {
        self.tokens.len()
    }

    pub(crate) fn push_prompt_token(&mut self, t: TokenId) {
        debug_assert_eq!(self.phase, Phase::Prefill);
        self.tokens.push(t);
    }

    /// `prompt_len` counts the whole prompt, including the tail token that the
    /// first decode step feeds.
    pub(crate) fn finish_prefill(&mut self, prompt_len: usize) {
        debug_assert_eq!(self.phase, Phase::Prefill);
        self.prompt_len = prompt_len;
        self.phase = Phase::Decode;
    }

    pub(crate) fn begin_decode(&mut self, t: TokenId) -> Result<()> {
        if self.phase != Phase::Decode {
            return Err(BackboneError::Contract(
                "decode step before prefill finished".into(),
            ));
        }
        if self.shallow_pending {
            return Err(BackboneError::Contract(
                "shallow pass already pending for this sequence".into(),
            ));
        }
        self.tokens.push(t);
        self.shallow_pending = true;
        Ok(())
    }

    pub(crate) fn end_decode(&mut self) -> Result<()> {
        if !self.shallow_pending {
            return Err(BackboneError::Contract(
                "deep pass without a shallow pass".into(),
            ));
        }
        self.shallow_pending = false;
        Ok(())
    }
}

/// A decoder that can be split after its first layer.
///
/// The engine calls [`Backbone::decode_shallow`] for every sequence of a step,
/// hands the shallow states to the distiller, then finishes with
/// [`Backbone::decode_deep`]. [`Backbone::decode_step`] runs both halves.
pub trait Backbone: Send + Sync {
    type Cache: Send;

    fn spec(&self) -> &BackboneSpec;

    fn head(&self) -> &LmHead;

    /// Ingests the prompt and returns a state ready for decoding.
    ///
    /// The last prompt token is not consumed here: it is the input of the
    /// first decode step, so a prompt of length `n` leaves `n − 1` cached
    /// positions and the first decode step attends over `n`. The returned
    /// pairs are the hidden states of the ingested positions (prefill phase).
    fn prefill(&self, prompt: &[TokenId]) -> Result<(SequenceState<Self::Cache>, Vec<HiddenPair>)>;

    /// Feeds `token` through layer 1 and returns `h¹`.
    fn decode_shallow(
        &self,
        state: &mut SequenceState<Self::Cache>,
        token: TokenId,
    ) -> Result<Vec<f64>>;

    /// Runs layers 2..L for the pending position.
    fn decode_deep(&self, state: &mut SequenceState<Self::Cache>) -> Result<StepOutput>;

    fn decode_step(
        &self,
        state: &mut SequenceState<Self::Cache>,
        token: TokenId,
    ) -> Result<StepOutput> {
        self.decode_shallow(state, token)?;
        self.decode_deep(state)
    }

    fn lm_head(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.head().project(h)
    }

    fn check_token(&self, token: TokenId) -> Result<()> {
        let vocab = self.spec().vocab_size;
        if token >= vocab {
            return Err(BackboneError::InvalidToken { token, vocab });
        }
        Ok(())
    }
}
