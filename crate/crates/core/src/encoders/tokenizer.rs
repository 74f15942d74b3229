use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::synthbench::VOCABULARY;

pub const PAD_ID: usize = 0;
pub const SUMMARY_ID: usize = 1;
pub const UNK_ID: usize = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<s>", "<unk>"];

/// Token ids of one caption; `ids[0]` is always the summary token.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Word-level tokenizer over the closed caption vocabulary.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    words: Vec<&'static str>,
    index: HashMap<&'static str, usize>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    pub fn new() -> Self {
        let words: Vec<&'static str> = SPECIALS.iter().chain(VOCABULARY).copied().collect();
        let index = words.iter().enumerate().map(|(i, &w)| (w, i)).collect();
        Self { words, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn word(&self, id: usize) -> Option<&'static str> {
        self.words.get(id).copied()
    }

    /// Lower-cases, splits off commas, maps unknown words to UNK, and keeps
    /// at most `max_len` ids including the leading summary token.
    pub fn tokenize(&self, caption: &str, max_len: usize) -> Result<TokenSequence> {
        let text = caption.to_lowercase().replace(',', " , ");
        let words: Vec<&str> = text.split_whitespace().collect();
        if words.is_empty() {
            return Err(Error::Invalid("empty caption".into()));
        }
        if max_len == 0 {
            return Err(Error::Invalid("max_len must be positive".into()));
        }
        let mut ids = Vec::with_capacity(words.len() + 1);
        ids.push(SUMMARY_ID);
        ids.extend(
            words
                .iter()
                .map(|w| self.index.get(w).copied().unwrap_or(UNK_ID)),
        );
        ids.truncate(max_len);
        Ok(TokenSequence { ids })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_ids() {
        let t = Tokenizer::new();
        let a = t.tokenize("longitudinal crack", 32).unwrap();
        let b = Tokenizer::new().tokenize("longitudinal crack", 32).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert_eq!(a.ids[0], SUMMARY_ID);
        assert!(a.ids[1..].iter().all(|&i| i != UNK_ID));
    }

    #[test]
    fn unknown_word_maps_to_unk() {
        let t = Tokenizer::new();
        let s = t.tokenize("a zebra crossing", 32).unwrap();
        assert_eq!(s.ids[2], UNK_ID);
        assert_eq!(s.ids[3], UNK_ID);
        assert_ne!(s.ids[1], UNK_ID);
    }

    #[test]
    fn truncation_keeps_summary_token() {
        let t = Tokenizer::new();
        let long = "crack ".repeat(100);
        let s = t.tokenize(&long, 32).unwrap();
        assert_eq!(s.len(), 32);
        assert_eq!(s.ids[0], SUMMARY_ID);
    }

    #[test]
    fn empty_caption_is_an_error() {
        let t = Tokenizer::new();
        assert!(t.tokenize("", 32).is_err());
        assert!(t.tokenize("   ", 32).is_err());
    }

    #[test]
    fn commas_are_tokens() {
        let t = Tokenizer::new();
        let s = t.tokenize("road, wet", 32).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.ids.iter().all(|&i| i != UNK_ID));
    }
}
