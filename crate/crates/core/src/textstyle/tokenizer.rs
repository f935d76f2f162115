use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
const BYTE_BASE: usize = 1;
const WORD_BASE: usize = BYTE_BASE + 256;
pub const DEFAULT_MAX_LEN: usize = 32;

/// Word-level tokenizer with byte fallback.
///
/// Id layout: `0` is padding, `1..=256` are raw bytes, and corpus words
/// follow in sorted order. A word missing from the vocabulary is spelled
/// out as its UTF-8 bytes, so no input is ever rejected for being unknown.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    words: Vec<String>,
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokens {
    pub ids: Vec<usize>,
    pub truncated: bool,
}

/// Lowercase, then split into runs of alphanumerics/apostrophes and
/// single punctuation characters.
pub fn split_words(sentence: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in sentence.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() || ch == '\'' {
            cur.push(ch);
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

impl Tokenizer {
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a str>, max_len: usize) -> Self {
        let mut words: Vec<String> = sentences.into_iter().flat_map(split_words).collect();
        words.sort();
        words.dedup();
        Self { words, max_len }
    }

    pub fn vocab_size(&self) -> usize {
        WORD_BASE + self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word_id(&self, word: &str) -> Option<usize> {
        self.words.binary_search_by(|w| w.as_str().cmp(word)).ok().map(|i| WORD_BASE + i)
    }

    pub fn tokenize(&self, sentence: &str) -> Result<Tokens> {
        if sentence.trim().is_empty() {
            return Err(Error::Invalid("cannot tokenize an empty sentence".into()));
        }
        let mut ids = Vec::new();
        for word in split_words(sentence) {
            match self.word_id(&word) {
                Some(id) => ids.push(id),
                None => ids.extend(word.bytes().map(|b| BYTE_BASE + b as usize)),
            }
        }
        let truncated = ids.len() > self.max_len;
        ids.truncate(self.max_len);
        Ok(Tokens { ids, truncated })
    }
}
