use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DataError;
use crate::eventgen::PixelMapPair;
use crate::InteractionClass;

/// Version tag of the shipped default templates. Bump when the text changes.
pub const PROMPT_TEMPLATE_VERSION: u32 = 1;

const DEFAULT_SYSTEM: &str = "You are an expert in neutrino physics analysing events recorded by a liquid argon \
time projection chamber. Each event is shown as two pixel maps, the {views}, where brightness encodes deposited \
charge. {nue_cc} events show an electromagnetic shower that starts at the interaction vertex. {numu_cc} events \
show a long straight minimum ionizing muon track. {nc} events show only short hadronic activity near the \
vertex, sometimes with photon showers detached from the vertex.";

const DEFAULT_USER: &str = "Classify this event as one of: {classes}. Answer with the phrase {prefix} followed by \
the class name.";

/// The fixed phrase every completion starts with (including the trailing space).
pub const DEFAULT_PREFIX: &str = "I classify the pixel maps as ";

/// Prompt templates. Placeholders in braces are substituted at render time:
/// `{views}`, `{classes}`, `{prefix}`, `{nue_cc}`, `{numu_cc}`, `{nc}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub version: u32,
    pub system_template: String,
    pub user_template: String,
    pub prefix: String,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            version: PROMPT_TEMPLATE_VERSION,
            system_template: DEFAULT_SYSTEM.to_string(),
            user_template: DEFAULT_USER.to_string(),
            prefix: DEFAULT_PREFIX.to_string(),
        }
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

impl PromptConfig {
    fn substitute(&self, template: &str) -> Result<String, DataError> {
        let labels = InteractionClass::ALL.map(|c| c.canonical_label());
        let vars: [(&str, String); 6] = [
            ("views", "XZ view and YZ view".to_string()),
            ("classes", format!("{}, {}, or {}", labels[0], labels[1], labels[2])),
            ("prefix", self.prefix.trim_end().to_string()),
            ("nue_cc", capitalize(labels[0])),
            ("numu_cc", capitalize(labels[1])),
            ("nc", capitalize(labels[2])),
        ];
        let mut out = String::with_capacity(template.len() + 64);
        let mut rest = template;
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let close = after
                .find('}')
                .ok_or_else(|| DataError::Template(format!("unterminated placeholder in `{template}`")))?;
            let name = &after[..close];
            let value = vars
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| v)
                .ok_or_else(|| DataError::Template(format!("unknown placeholder `{{{name}}}`")))?;
            out.push_str(value);
            rest = &after[close + 1..];
        }
        if rest.contains('}') {
            return Err(DataError::Template(format!("stray `}}` in `{template}`")));
        }
        out.push_str(rest);
        Ok(out)
    }

    pub fn system_text(&self) -> Result<String, DataError> {
        self.substitute(&self.system_template)
    }

    pub fn user_text(&self) -> Result<String, DataError> {
        self.substitute(&self.user_template)
    }

    /// Completion for a class: the prefix followed by the canonical label.
    pub fn target(&self, class: InteractionClass) -> String {
        format!("{}{}", self.prefix, class.canonical_label())
    }

    /// Hex SHA-256 over every field; adapter checkpoints record it so that
    /// inference can refuse mismatched templates.
    pub fn template_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.version.to_le_bytes());
        for part in [&self.system_template, &self.user_template, &self.prefix] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        super::hex(&h.finalize())
    }
}

/// One supervised fine-tuning example. The image pair is referenced by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub event_id: u64,
    pub system_text: String,
    pub user_text: String,
    pub target_completion: String,
}

pub fn build_prompt_record(pair: &PixelMapPair, config: &PromptConfig) -> Result<PromptRecord, DataError> {
    Ok(PromptRecord {
        event_id: pair.event_id,
        system_text: config.system_text()?,
        user_text: config.user_text()?,
        target_completion: config.target(pair.truth.interaction_class),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eventgen::{Current, EventTruth, Flavor, Grid};

    fn pair(flavor: Flavor, current: Current) -> PixelMapPair {
        PixelMapPair {
            event_id: 3,
            truth: EventTruth::new(flavor, current, 1.0, [1.0; 3]),
            view_xz: Grid::zeros(4),
            view_yz: Grid::zeros(4),
        }
    }

    #[test]
    fn numu_target() {
        let r = build_prompt_record(&pair(Flavor::NuMu, Current::CC), &PromptConfig::default()).unwrap();
        assert_eq!(r.target_completion, "I classify the pixel maps as muon neutrino charged current");
        assert_eq!(r.event_id, 3);
    }

    #[test]
    fn nc_target_suffix() {
        let r = build_prompt_record(&pair(Flavor::NuE, Current::NC), &PromptConfig::default()).unwrap();
        assert!(r.target_completion.ends_with("neutral current"));
    }

    #[test]
    fn target_is_prefix_then_label() {
        assert_eq!(DEFAULT_PREFIX.len(), 29);
        for c in InteractionClass::ALL {
            let t = PromptConfig::default().target(c);
            assert_eq!(&t[..29], DEFAULT_PREFIX);
            assert_eq!(&t[29..], c.canonical_label());
        }
    }

    #[test]
    fn placeholders_fully_substituted() {
        let r = build_prompt_record(&pair(Flavor::NuE, Current::CC), &PromptConfig::default()).unwrap();
        for text in [&r.system_text, &r.user_text, &r.target_completion] {
            assert!(!text.contains('{') && !text.contains('}'), "{text}");
        }
        assert!(r.user_text.contains("electron neutrino charged current, muon neutrino charged current, or neutral current"));
    }

    #[test]
    fn unknown_placeholder_is_an_error() {
        let cfg = PromptConfig { user_template: "hello {nope}".into(), ..Default::default() };
        assert!(matches!(cfg.user_text(), Err(DataError::Template(_))));
        let cfg = PromptConfig { user_template: "hello {views".into(), ..Default::default() };
        assert!(cfg.user_text().is_err());
    }

    #[test]
    fn template_hash_tracks_text() {
        let a = PromptConfig::default();
        let b = PromptConfig { system_template: format!("{} ", a.system_template), ..a.clone() };
        assert_ne!(a.template_hash(), b.template_hash());
        assert_eq!(a.template_hash(), PromptConfig::default().template_hash());
    }
}
