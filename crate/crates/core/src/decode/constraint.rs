use super::{check_log_distribution, temperature_rescale, DecodeError, TokenId, TokenScorer, Tokenizer};
use crate::class::argmax;

/// Fixed prefix plus a closed set of label continuations.
#[derive(Debug, Clone, PartialEq)]
pub struct PhrasalConstraint {
    pub labels: Vec<String>,
    pub prefix_tokens: Vec<TokenId>,
    pub label_token_seqs: Vec<Vec<TokenId>>,
    /// First position at which the label sequences stop sharing a token.
    pub decision_offset: usize,
}

impl PhrasalConstraint {
    /// Candidate tokens at the decision position, one per label.
    pub fn decision_tokens(&self) -> Vec<TokenId> {
        self.label_token_seqs.iter().map(|s| s[self.decision_offset]).collect()
    }

    /// Tokens shared by every label before the decision position.
    pub fn shared_label_tokens(&self) -> &[TokenId] {
        &self.label_token_seqs[0][..self.decision_offset]
    }

    /// Every full output the constraint admits.
    pub fn admissible_outputs(&self) -> Vec<Vec<TokenId>> {
        self.label_token_seqs
            .iter()
            .map(|s| self.prefix_tokens.iter().chain(s).copied().collect())
            .collect()
    }
}

/// Tokenizes the prefix and labels and locates the decision position.
pub fn build_constraint<T: Tokenizer + ?Sized>(
    tokenizer: &T,
    labels: &[&str],
    prefix: &str,
) -> Result<PhrasalConstraint, DecodeError> {
    if labels.len() < 2 {
        return Err(DecodeError::Config(format!("need at least two labels, got {}", labels.len())));
    }
    for (i, a) in labels.iter().enumerate() {
        if a.trim().is_empty() {
            return Err(DecodeError::Config("empty label".into()));
        }
        if let Some(b) = labels[i + 1..].iter().find(|b| *b == a) {
            return Err(DecodeError::Config(format!("duplicate labels `{a}` and `{b}`")));
        }
    }
    let seqs: Vec<Vec<TokenId>> = labels.iter().map(|l| tokenizer.encode(l)).collect();
    let longest = seqs.iter().map(Vec::len).max().unwrap_or(0);
    let mut offset = None;
    for pos in 0..longest {
        // A label that runs out of tokens before the others diverge is a
        // strict token-prefix of them and cannot be scored at one position.
        if let Some(short) = seqs.iter().position(|s| s.len() <= pos) {
            let other = seqs.iter().position(|s| s.len() > pos).unwrap();
            return Err(DecodeError::Config(format!(
                "label `{}` is a token prefix of `{}` under this tokenizer",
                labels[short], labels[other]
            )));
        }
        if seqs.iter().any(|s| s[pos] != seqs[0][pos]) {
            offset = Some(pos);
            break;
        }
    }
    let Some(offset) = offset else {
        return Err(DecodeError::Config(format!(
            "labels {labels:?} tokenize identically and cannot be distinguished"
        )));
    };
    for i in 0..seqs.len() {
        for j in i + 1..seqs.len() {
            if seqs[i][offset] == seqs[j][offset] {
                return Err(DecodeError::Config(format!(
                    "labels `{}` and `{}` share their decision token at position {offset}",
                    labels[i], labels[j]
                )));
            }
        }
    }
    Ok(PhrasalConstraint {
        labels: labels.iter().map(|s| s.to_string()).collect(),
        prefix_tokens: tokenizer.encode(prefix),
        label_token_seqs: seqs,
        decision_offset: offset,
    })
}

/// Raw decision-token log-probabilities and their tempered softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceScore {
    pub raw_logp: Vec<f64>,
    pub temperature: f64,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub label_index: usize,
    pub confidence: ConfidenceScore,
    /// `prefix_tokens ++ label_token_seqs[label_index]`.
    pub tokens: Vec<TokenId>,
}

/// Forces the output to the constraint and scores the label choice.
///
/// The scorer is queried once, at the position right after
/// `prompt ++ prefix ++ shared label tokens`. Ties resolve to the lowest
/// label index.
pub fn constrained_generate<S: TokenScorer + ?Sized>(
    scorer: &S,
    prompt_tokens: &[TokenId],
    constraint: &PhrasalConstraint,
    temperature: f64,
) -> Result<DecodeOutput, DecodeError> {
    let vocab = scorer.vocab_size();
    let candidates = constraint.decision_tokens();
    if let Some(t) = candidates.iter().chain(&constraint.prefix_tokens).find(|&&t| t as usize >= vocab) {
        return Err(DecodeError::Config(format!("token {t} outside scorer vocabulary of {vocab}")));
    }
    let context: Vec<TokenId> = prompt_tokens
        .iter()
        .chain(&constraint.prefix_tokens)
        .chain(constraint.shared_label_tokens())
        .copied()
        .collect();
    let scores = scorer.score(&context)?;
    check_log_distribution(&scores, vocab)?;
    let raw_logp: Vec<f64> = candidates.iter().map(|&t| scores[t as usize]).collect();
    let probs = temperature_rescale(&raw_logp, temperature)?;
    let label_index = argmax(&raw_logp);
    let tokens = constraint
        .prefix_tokens
        .iter()
        .chain(&constraint.label_token_seqs[label_index])
        .copied()
        .collect();
    Ok(DecodeOutput { label_index, confidence: ConfidenceScore { raw_logp, temperature, probs }, tokens })
}

#[cfg(test)]
mod tests {
    use super::super::WordTokenizer;
    use super::*;
    use crate::InteractionClass;

    const PREFIX: &str = "I classify the pixel maps as ";

    fn default_labels() -> Vec<&'static str> {
        InteractionClass::ALL.iter().map(|c| c.canonical_label()).collect()
    }

    fn tokenizer(labels: &[&str]) -> WordTokenizer {
        let mut texts = vec![PREFIX];
        texts.extend_from_slice(labels);
        WordTokenizer::from_texts(&[], &texts)
    }

    struct FixedScorer {
        logp: Vec<f64>,
    }

    impl TokenScorer for FixedScorer {
        fn vocab_size(&self) -> usize {
            self.logp.len()
        }
        fn score(&self, _: &[TokenId]) -> Result<Vec<f64>, DecodeError> {
            Ok(self.logp.clone())
        }
    }

    fn scorer_with(tok: &WordTokenizer, c: &PhrasalConstraint, decision_probs: &[f64]) -> FixedScorer {
        let n = tok.vocab_size();
        let rest = 1.0 - decision_probs.iter().sum::<f64>();
        let others = n - decision_probs.len();
        let mut p = vec![rest / others as f64; n];
        for (t, q) in c.decision_tokens().iter().zip(decision_probs) {
            p[*t as usize] = *q;
        }
        FixedScorer { logp: p.iter().map(|x| x.ln()).collect() }
    }

    #[test]
    fn default_labels_diverge_at_first_token() {
        let labels = default_labels();
        let tok = tokenizer(&labels);
        let c = build_constraint(&tok, &labels, PREFIX).unwrap();
        assert_eq!(c.decision_offset, 0);
        let words: Vec<String> = c.decision_tokens().iter().map(|&t| tok.decode(&[t])).collect();
        assert_eq!(words, ["electron", "muon", "neutral"]);
        assert_eq!(tok.decode(&c.prefix_tokens), "I classify the pixel maps as");
    }

    #[test]
    fn duplicate_labels_rejected() {
        let tok = tokenizer(&["alpha"]);
        assert!(matches!(build_constraint(&tok, &["alpha", "alpha"], PREFIX), Err(DecodeError::Config(_))));
    }

    #[test]
    fn shared_leading_tokens_move_the_decision() {
        let labels = ["charged current electron", "charged current muon", "charged neutral"];
        let tok = tokenizer(&labels);
        let c = build_constraint(&tok, &labels, PREFIX);
        // "charged current" vs "charged neutral": positions 1 differ only partly.
        assert!(matches!(c, Err(DecodeError::Config(ref m)) if m.contains("share their decision token")));

        let labels = ["big red", "big blue", "big green"];
        let tok = tokenizer(&labels);
        let c = build_constraint(&tok, &labels, PREFIX).unwrap();
        assert_eq!(c.decision_offset, 1);
        assert_eq!(tok.decode(c.shared_label_tokens()), "big");
    }

    #[test]
    fn token_prefix_label_rejected() {
        let labels = ["muon", "muon track", "shower"];
        let tok = tokenizer(&labels);
        // Diverges at 0 ("muon" vs "shower") but two labels share "muon".
        assert!(build_constraint(&tok, &labels, PREFIX).is_err());
        let labels = ["big", "big red", "big blue"];
        let tok = tokenizer(&labels);
        let err = build_constraint(&tok, &labels, PREFIX).unwrap_err();
        assert!(matches!(err, DecodeError::Config(ref m) if m.contains("token prefix")), "{err:?}");
    }

    #[test]
    fn unknown_words_collapse_and_are_rejected() {
        let tok = WordTokenizer::from_texts(&[], &[PREFIX]);
        assert!(build_constraint(&tok, &["zeta", "eta"], PREFIX).is_err());
    }

    #[test]
    fn equal_scores_give_uniform_and_lowest_index() {
        let labels = default_labels();
        let tok = tokenizer(&labels);
        let c = build_constraint(&tok, &labels, PREFIX).unwrap();
        let s = scorer_with(&tok, &c, &[0.2, 0.2, 0.2]);
        let out = constrained_generate(&s, &[], &c, 5.0).unwrap();
        assert_eq!(out.label_index, 0);
        for p in &out.confidence.probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_form_confidence() {
        let labels = default_labels();
        let tok = tokenizer(&labels);
        let c = build_constraint(&tok, &labels, PREFIX).unwrap();
        // Unnormalized decision mass 0.35/0.1/0.05 renormalizes to 0.7/0.2/0.1.
        let s = scorer_with(&tok, &c, &[0.35, 0.1, 0.05]);
        let out = constrained_generate(&s, &[1, 2, 3], &c, 5.0).unwrap();
        assert_eq!(out.label_index, 0);
        for (p, want) in out.confidence.probs.iter().zip([0.99804, 0.00190, 0.0000594]) {
            assert!((p - want).abs() < 1e-5);
        }
        assert_eq!(out.tokens, c.admissible_outputs()[0]);
        assert_eq!(tok.decode(&out.tokens), "I classify the pixel maps as electron neutrino charged current");
    }

    #[test]
    fn scorer_contract_violations() {
        let labels = default_labels();
        let tok = tokenizer(&labels);
        let c = build_constraint(&tok, &labels, PREFIX).unwrap();
        let short = FixedScorer { logp: vec![-1.0; 3] };
        assert!(constrained_generate(&short, &[], &c, 5.0).is_err());
        let mut s = scorer_with(&tok, &c, &[0.3, 0.3, 0.3]);
        s.logp[0] = f64::NAN;
        assert!(matches!(constrained_generate(&s, &[], &c, 5.0), Err(DecodeError::ScorerContract(_))));
        let unnormalized = FixedScorer { logp: vec![0.0; tok.vocab_size()] };
        assert!(matches!(constrained_generate(&unnormalized, &[], &c, 5.0), Err(DecodeError::ScorerContract(_))));
    }
}
