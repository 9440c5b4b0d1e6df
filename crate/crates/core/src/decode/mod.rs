//! Constrained generation and confidence extraction over an abstract
//! autoregressive token scorer.
//!
//! Output is forced to `prefix ++ label_i` for one of a closed set of labels.
//! Because the prefix is fixed and the only branching happens where the
//! label token sequences first diverge, a beam of width one that scores the
//! candidate tokens at that position returns the same result as any wider
//! beam. Confidence is `softmax(T · log p_i)` over the candidate tokens.

mod constraint;
pub mod fuzz;
mod temperature;
mod tokenizer;

pub use constraint::{build_constraint, constrained_generate, ConfidenceScore, DecodeOutput, PhrasalConstraint};
pub use temperature::{temperature_rescale, DEFAULT_TEMPERATURE};
pub use tokenizer::{Tokenizer, WordTokenizer, UNK};

use thiserror::Error;

pub type TokenId = u32;

/// Tolerance on `logsumexp(scores) = 0` for a scorer's output.
pub const SCORER_LSE_TOLERANCE: f64 = 1e-4;

/// Next-token log-probabilities given a token prefix.
pub trait TokenScorer {
    fn vocab_size(&self) -> usize;
    fn score(&self, prefix: &[TokenId]) -> Result<Vec<f64>, DecodeError>;
}

impl<S: TokenScorer + ?Sized> TokenScorer for &S {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn score(&self, prefix: &[TokenId]) -> Result<Vec<f64>, DecodeError> {
        (**self).score(prefix)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("scorer contract violated: {0}")]
    ScorerContract(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("backend error: {0}")]
    Backend(String),
}

/// Validates a scorer output against the vocabulary size and the
/// log-distribution tolerance.
pub fn check_log_distribution(scores: &[f64], vocab_size: usize) -> Result<(), DecodeError> {
    if scores.len() != vocab_size {
        return Err(DecodeError::ScorerContract(format!(
            "expected {vocab_size} scores, got {}",
            scores.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(DecodeError::ScorerContract(format!("non-finite score {} at token {i}", scores[i])));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    if lse.abs() > SCORER_LSE_TOLERANCE {
        return Err(DecodeError::ScorerContract(format!("log-sum-exp of scores is {lse}, expected 0")));
    }
    Ok(())
}
