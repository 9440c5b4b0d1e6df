//! Vocabulary, chat-style sequence layout and image patch features.

use super::config::BackboneConfig;
use crate::datastore::{PromptConfig, PromptRecord};
use crate::decode::{TokenId, Tokenizer, WordTokenizer};
use crate::eventgen::{Grid, PixelMapPair};
use crate::InteractionClass;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SYSTEM: &str = "<system>";
pub const USER: &str = "<user>";
pub const ASSISTANT: &str = "<assistant>";
pub const SPECIALS: [&str; 6] = [crate::decode::UNK, BOS, EOS, SYSTEM, USER, ASSISTANT];

/// Vocabulary covering the default prompt texts and every class label.
pub fn default_tokenizer() -> WordTokenizer {
    let p = PromptConfig::default();
    let mut texts = vec![
        p.system_text().expect("default template renders"),
        p.user_text().expect("default template renders"),
        p.prefix.clone(),
    ];
    texts.extend(InteractionClass::ALL.iter().map(|c| c.canonical_label().to_string()));
    WordTokenizer::from_texts(&SPECIALS, &texts)
}

fn special(tok: &WordTokenizer, name: &str) -> TokenId {
    tok.id(name).unwrap_or_else(|| tok.unk_id())
}

/// Tokens up to and including the assistant marker.
pub fn prompt_tokens(tok: &WordTokenizer, system: &str, user: &str) -> Vec<TokenId> {
    let mut out = vec![special(tok, BOS), special(tok, SYSTEM)];
    out.extend(tok.encode(system));
    out.push(special(tok, USER));
    out.extend(tok.encode(user));
    out.push(special(tok, ASSISTANT));
    out
}

/// Training sequence and per-token loss mask (true on completion tokens).
/// An empty completion yields no supervised tokens at all.
pub fn training_tokens(tok: &WordTokenizer, record: &PromptRecord) -> (Vec<TokenId>, Vec<bool>) {
    let mut tokens = prompt_tokens(tok, &record.system_text, &record.user_text);
    let mut mask = vec![false; tokens.len()];
    let completion = tok.encode(&record.target_completion);
    if !completion.is_empty() {
        tokens.extend(&completion);
        tokens.push(special(tok, EOS));
        mask.resize(tokens.len(), true);
    }
    (tokens, mask)
}

/// Per-patch features of both views: the square root of the mean and the
/// maximum of each pooled cell, scaled to `[0, 1]`.
pub fn image_features(pair: &PixelMapPair, config: &BackboneConfig) -> Vec<f32> {
    let mut out = Vec::with_capacity(config.image_tokens() * config.patch_features());
    for view in pair.views() {
        view_features(view, config, &mut out);
    }
    out
}

fn view_features(grid: &Grid, config: &BackboneConfig, out: &mut Vec<f32>) {
    let g = config.pool_grid;
    let mut mean = vec![0.0f32; g * g];
    let mut max = vec![0.0f32; g * g];
    let mut count = vec![0u32; g * g];
    for r in 0..grid.size {
        let cr = r * g / grid.size;
        for c in 0..grid.size {
            let cell = cr * g + c * g / grid.size;
            let v = f32::from(grid.data[r * grid.size + c]) / 255.0;
            mean[cell] += v;
            max[cell] = max[cell].max(v);
            count[cell] += 1;
        }
    }
    for (m, n) in mean.iter_mut().zip(&count) {
        *m = (*m / (*n).max(1) as f32).sqrt();
    }
    let p = config.patch_cells;
    for pr in 0..g / p {
        for pc in 0..g / p {
            for source in [&mean, &max] {
                for r in 0..p {
                    for c in 0..p {
                        out.push(source[(pr * p + r) * g + pc * p + c]);
                    }
                }
            }
        }
    }
}
