use std::collections::HashMap;

use super::TokenId;

pub trait Tokenizer {
    fn encode(&self, text: &str) -> Vec<TokenId>;
    fn decode(&self, ids: &[TokenId]) -> String;
    fn vocab_size(&self) -> usize;
}

const PUNCTUATION: &[char] = &[',', '.', ':', ';', '?', '!', '(', ')'];

/// Word-level tokenizer: whitespace-separated words with punctuation split
/// off as separate tokens. Unknown words map to the `<unk>` id.
#[derive(Debug, Clone, PartialEq)]
pub struct WordTokenizer {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
    unk: TokenId,
}

pub const UNK: &str = "<unk>";

impl WordTokenizer {
    /// Builds a vocabulary: `specials` first (with `<unk>` prepended when
    /// missing), then every distinct word of `texts` in order of appearance.
    pub fn from_texts<S: AsRef<str>>(specials: &[&str], texts: &[S]) -> Self {
        let mut words: Vec<String> = Vec::new();
        let mut index = HashMap::new();
        let mut add = |w: &str, words: &mut Vec<String>| {
            if !index.contains_key(w) {
                index.insert(w.to_string(), words.len() as TokenId);
                words.push(w.to_string());
            }
        };
        if !specials.contains(&UNK) {
            add(UNK, &mut words);
        }
        for s in specials {
            add(s, &mut words);
        }
        for t in texts {
            for w in split_words(t.as_ref()) {
                add(w, &mut words);
            }
        }
        Self::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index: HashMap<String, TokenId> =
            words.iter().enumerate().map(|(i, w)| (w.clone(), i as TokenId)).collect();
        let unk = index[UNK];
        Self { words, index, unk }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn unk_id(&self) -> TokenId {
        self.unk
    }
}

fn split_words(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace().flat_map(|w| {
        let mut parts = Vec::new();
        let mut start = 0;
        for (i, ch) in w.char_indices() {
            if PUNCTUATION.contains(&ch) {
                if start < i {
                    parts.push(&w[start..i]);
                }
                parts.push(&w[i..i + ch.len_utf8()]);
                start = i + ch.len_utf8();
            }
        }
        if start < w.len() {
            parts.push(&w[start..]);
        }
        parts
    })
}

impl Tokenizer for WordTokenizer {
    fn encode(&self, text: &str) -> Vec<TokenId> {
        split_words(text).map(|w| self.index.get(w).copied().unwrap_or(self.unk)).collect()
    }

    fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            let w = self.words.get(id as usize).map(String::as_str).unwrap_or(UNK);
            let glue = w.len() == 1 && w.chars().all(|c| PUNCTUATION.contains(&c));
            if !out.is_empty() && !glue {
                out.push(' ');
            }
            out.push_str(w);
        }
        out
    }

    fn vocab_size(&self) -> usize {
        self.words.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation() {
        let t = WordTokenizer::from_texts(&["<bos>"], &["Hello, world. Bye"]);
        assert_eq!(t.decode(&t.encode("Hello, world.")), "Hello, world.");
        assert_eq!(t.words()[..2], ["<unk>".to_string(), "<bos>".to_string()]);
        assert_eq!(t.encode("mystery"), vec![t.unk_id()]);
        assert_eq!(t.vocab_size(), 7);
    }
}
