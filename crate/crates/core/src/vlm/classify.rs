use std::time::Instant;

use super::backbone::{ImageInput, VlmModel};
use super::tokens::prompt_tokens;
use super::VlmError;
use crate::class::Prediction;
use crate::datastore::PromptConfig;
use crate::decode::{build_constraint, constrained_generate, DecodeError, PhrasalConstraint, TokenId, TokenScorer, Tokenizer};
use crate::eventgen::PixelMapPair;
use crate::InteractionClass;

/// Next-token scorer conditioned on one event's images.
pub struct PairScorer<'a> {
    pub model: &'a VlmModel,
    pub image: ImageInput,
}

impl TokenScorer for PairScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.tokenizer.vocab_size()
    }

    fn score(&self, prefix: &[TokenId]) -> Result<Vec<f64>, DecodeError> {
        self.model.next_token_logp(&self.image, prefix).map_err(|e| DecodeError::Backend(e.to_string()))
    }
}

/// Classifies events by constrained decoding over the canonical labels.
pub struct VlmClassifier {
    pub model: VlmModel,
    pub prompt: PromptConfig,
    pub temperature: f64,
    constraint: PhrasalConstraint,
    prompt_tokens: Vec<TokenId>,
}

impl VlmClassifier {
    pub fn new(model: VlmModel, prompt: PromptConfig, temperature: f64) -> Result<Self, VlmError> {
        let labels: Vec<&str> = InteractionClass::ALL.iter().map(|c| c.canonical_label()).collect();
        let constraint = build_constraint(&model.tokenizer, &labels, &prompt.prefix)?;
        let prompt_tokens = prompt_tokens(&model.tokenizer, &prompt.system_text()?, &prompt.user_text()?);
        Ok(Self { model, prompt, temperature, constraint, prompt_tokens })
    }

    pub fn constraint(&self) -> &PhrasalConstraint {
        &self.constraint
    }

    pub fn classify(&self, pair: &PixelMapPair) -> Result<Prediction, VlmError> {
        let start = Instant::now();
        let scorer = PairScorer { model: &self.model, image: self.model.image_input(pair) };
        let out = constrained_generate(&scorer, &self.prompt_tokens, &self.constraint, self.temperature)?;
        let latency_ms = start.elapsed().as_secs_f64() * 1e3;
        let class = InteractionClass::from_index(out.label_index).expect("labels follow class order");
        let c = &out.confidence;
        Ok(Prediction {
            class,
            confidences: [c.probs[0], c.probs[1], c.probs[2]],
            raw_logp: [c.raw_logp[0], c.raw_logp[1], c.raw_logp[2]],
            latency_ms,
        })
    }

    /// Decoded text of the constrained output for `pair`.
    pub fn generate_text(&self, pair: &PixelMapPair) -> Result<String, VlmError> {
        let scorer = PairScorer { model: &self.model, image: self.model.image_input(pair) };
        let out = constrained_generate(&scorer, &self.prompt_tokens, &self.constraint, self.temperature)?;
        Ok(self.model.tokenizer.decode(&out.tokens))
    }
}
