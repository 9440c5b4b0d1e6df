use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

pub const NUM_CLASSES: usize = 3;

/// The three interaction classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InteractionClass {
    NueCc,
    NumuCc,
    Nc,
}

impl InteractionClass {
    pub const ALL: [InteractionClass; NUM_CLASSES] =
        [InteractionClass::NueCc, InteractionClass::NumuCc, InteractionClass::Nc];

    pub fn index(self) -> usize {
        match self {
            InteractionClass::NueCc => 0,
            InteractionClass::NumuCc => 1,
            InteractionClass::Nc => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Short tag used in file names and tables.
    pub fn tag(self) -> &'static str {
        match self {
            InteractionClass::NueCc => "NUE_CC",
            InteractionClass::NumuCc => "NUMU_CC",
            InteractionClass::Nc => "NC",
        }
    }

    /// Canonical natural-language surface form used in prompt targets and
    /// constrained decoding. The leading words are pairwise distinct.
    pub fn canonical_label(self) -> &'static str {
        match self {
            InteractionClass::NueCc => "electron neutrino charged current",
            InteractionClass::NumuCc => "muon neutrino charged current",
            InteractionClass::Nc => "neutral current",
        }
    }
}

impl fmt::Display for InteractionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for InteractionClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown interaction class `{s}`"))
    }
}

/// Output of either classifier for one event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: InteractionClass,
    /// Per-class confidence, sums to one.
    pub confidences: [f64; NUM_CLASSES],
    /// Per-class log-probabilities the confidences were derived from.
    pub raw_logp: [f64; NUM_CLASSES],
    pub latency_ms: f64,
}

/// Index of the maximum entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
