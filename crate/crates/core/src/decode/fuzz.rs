//! Seeded random scorers for exercising the constrained decoder.

use super::{constrained_generate, DecodeError, PhrasalConstraint, TokenId, TokenScorer};

/// A scorer whose output is a random log-distribution determined by
/// `(seed, prefix)`. Logit scale is itself random so outputs range from
/// nearly flat to nearly one-hot.
#[derive(Debug, Clone, Copy)]
pub struct RandomScorer {
    pub vocab_size: usize,
    pub seed: u64,
}

impl TokenScorer for RandomScorer {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn score(&self, prefix: &[TokenId]) -> Result<Vec<f64>, DecodeError> {
        use rand::Rng;
        let streams: Vec<u64> = prefix.iter().map(|&t| u64::from(t)).collect();
        let mut rng = crate::seed::rng(self.seed, &streams);
        let scale = 10f64.powf(rng.random_range(-2.0..1.5));
        let logits: Vec<f64> = (0..self.vocab_size).map(|_| scale * rng.random_range(-3.0..3.0)).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        Ok(logits.into_iter().map(|l| l - lse).collect())
    }
}

/// Result of a closure sweep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClosureReport {
    pub trials: usize,
    pub admissible: usize,
    pub per_label: Vec<usize>,
}

/// Runs `trials` random scorers (seeds `base_seed..base_seed + trials`)
/// through the decoder and counts outputs that are exactly one of the
/// constraint's admissible sequences.
pub fn closure_sweep(
    constraint: &PhrasalConstraint,
    prompt: &[TokenId],
    vocab_size: usize,
    trials: usize,
    base_seed: u64,
    temperature: f64,
) -> Result<ClosureReport, DecodeError> {
    let admissible = constraint.admissible_outputs();
    let outcomes = crate::par::map_range(base_seed, base_seed + trials as u64, |seed| {
        let scorer = RandomScorer { vocab_size, seed };
        constrained_generate(&scorer, prompt, constraint, temperature).map(|out| {
            let ok = admissible.iter().any(|a| *a == out.tokens)
                && out.tokens.starts_with(&constraint.prefix_tokens)
                && out.tokens == admissible[out.label_index];
            (ok, out.label_index)
        })
    });
    let mut report = ClosureReport { trials, admissible: 0, per_label: vec![0; admissible.len()] };
    for o in outcomes {
        let (ok, label) = o?;
        report.admissible += usize::from(ok);
        report.per_label[label] += 1;
    }
    Ok(report)
}
