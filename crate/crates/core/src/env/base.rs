//! Vocabulary, prompt distribution, and trajectory types.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors from the tabular environment layer.
#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error("invalid prompt distribution: {0}")]
    InvalidPromptDist(String),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("invalid reward model: {0}")]
    InvalidReward(String),
    #[error(
        "enumeration too large: vocab^max_len = {size} exceeds the configured bound {bound}"
    )]
    EnumerationTooLarge { size: u128, bound: u64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate group: group size {0} too small (need {1})")]
    DegenerateGroup(usize, usize),
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

fn default_enumeration_bound() -> u64 {
    1_000_000
}

/// Token alphabet with a designated end-of-sequence token and a hard length
/// cap. Generation stops at the first EOS or after `max_len` tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabSpec {
    pub vocab_size: usize,
    pub eos_token: usize,
    pub max_len: usize,
    /// Upper bound on vocab^max_len accepted for exact enumeration.
    #[serde(default = "default_enumeration_bound")]
    pub enumeration_bound: u64,
}

impl VocabSpec {
    pub fn new(vocab_size: usize, eos_token: usize, max_len: usize) -> Result<Self, EnvError> {
        let spec = VocabSpec {
            vocab_size,
            eos_token,
            max_len,
            enumeration_bound: default_enumeration_bound(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.vocab_size == 0 || self.vocab_size > 16 {
            return Err(EnvError::InvalidVocab(format!(
                "vocab_size {} outside 1..=16",
                self.vocab_size
            )));
        }
        if self.eos_token >= self.vocab_size {
            return Err(EnvError::InvalidVocab(format!(
                "eos_token {} not below vocab_size {}",
                self.eos_token, self.vocab_size
            )));
        }
        if self.max_len == 0 || self.max_len > 6 {
            return Err(EnvError::InvalidVocab(format!(
                "max_len {} outside 1..=6",
                self.max_len
            )));
        }
        Ok(())
    }

    /// vocab^max_len, the loose upper bound on distinct trajectories.
    pub fn enumeration_size(&self) -> u128 {
        (self.vocab_size as u128).pow(self.max_len as u32)
    }

    pub fn check_enumerable(&self) -> Result<(), EnvError> {
        let size = self.enumeration_size();
        if size > self.enumeration_bound as u128 {
            return Err(EnvError::EnumerationTooLarge {
                size,
                bound: self.enumeration_bound,
            });
        }
        Ok(())
    }

    /// Index of the beginning-of-sequence slot on the previous-token axis.
    pub fn bos_index(&self) -> usize {
        self.vocab_size
    }
}

/// Distribution over the finite context set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptDist {
    probs: Vec<f64>,
}

impl PromptDist {
    pub fn new(probs: Vec<f64>) -> Result<Self, EnvError> {
        if probs.is_empty() {
            return Err(EnvError::InvalidPromptDist("empty".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(EnvError::InvalidPromptDist(
                "entries must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(EnvError::InvalidPromptDist(format!(
                "entries sum to {total}, expected 1 within 1e-12"
            )));
        }
        Ok(PromptDist { probs })
    }

    pub fn uniform(contexts: usize) -> Self {
        PromptDist {
            probs: vec![1.0 / contexts as f64; contexts],
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, context: usize) -> f64 {
        self.probs[context]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// One generated token sequence for a context. At most `max_len` tokens,
/// nothing after EOS, and the final token is EOS unless the cap was hit.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Trajectory {
    pub context: usize,
    pub tokens: Vec<usize>,
}

impl Trajectory {
    pub fn new(context: usize, tokens: Vec<usize>, vocab: &VocabSpec) -> Result<Self, EnvError> {
        let t = Trajectory { context, tokens };
        t.validate(vocab)?;
        Ok(t)
    }

    pub fn validate(&self, vocab: &VocabSpec) -> Result<(), EnvError> {
        let n = self.tokens.len();
        if n == 0 || n > vocab.max_len {
            return Err(EnvError::InvalidTrajectory(format!(
                "length {n} outside 1..={}",
                vocab.max_len
            )));
        }
        if let Some(&bad) = self.tokens.iter().find(|&&t| t >= vocab.vocab_size) {
            return Err(EnvError::InvalidTrajectory(format!(
                "token {bad} outside vocabulary of size {}",
                vocab.vocab_size
            )));
        }
        if let Some(pos) = self.tokens.iter().position(|&t| t == vocab.eos_token) {
            if pos + 1 != n {
                return Err(EnvError::InvalidTrajectory(
                    "tokens present after EOS".into(),
                ));
            }
        } else if n != vocab.max_len {
            return Err(EnvError::InvalidTrajectory(
                "trajectory neither ends with EOS nor reaches max_len".into(),
            ));
        }
        Ok(())
    }

    /// Generated token count, EOS included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}
