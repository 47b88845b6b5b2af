//! Word-level vocabulary with four reserved specials at fixed ids.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const UNK: TokenId = 0;
pub const SEP: TokenId = 1;
pub const EOS: TokenId = 2;
pub const PAD: TokenId = 3;
/// First id assigned to a corpus token.
pub const FIRST_REGULAR: TokenId = 4;

const SPECIAL_TOKENS: [&str; 4] = ["<unk>", "<sep>", "<eos>", "<pad>"];

/// Bijective token/id map over the most frequent corpus words.
///
/// Ids 0..4 are the reserved specials; corpus text can never produce them
/// because `<` and `>` are split away as punctuation.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
}

/// Lowercases and splits on whitespace and punctuation boundaries.
/// Tokens are maximal alphanumeric runs; everything else is a separator.
pub fn split_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            for lc in ch.to_lowercase() {
                current.push(lc);
            }
        } else if !current.is_empty() {
            words.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

impl Vocabulary {
    /// Builds a vocabulary from raw texts, capped at `max_size` ids
    /// (including the 4 specials). The most frequent words are kept;
    /// frequency ties break lexicographically so ids are stable across runs.
    pub fn build<T: AsRef<str>>(texts: &[T], max_size: usize) -> Result<Self> {
        if texts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if max_size < SPECIAL_TOKENS.len() {
            return Err(Error::VocabTooSmall(max_size));
        }

        let mut freq: HashMap<String, u64> = HashMap::new();
        for text in texts {
            for word in split_words(text.as_ref()) {
                *freq.entry(word).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let capacity = max_size - SPECIAL_TOKENS.len();
        let mut id_to_token: Vec<String> =
            SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(ranked.into_iter().take(capacity).map(|(w, _)| w));

        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as TokenId))
            .collect();

        Ok(Self {
            token_to_id,
            id_to_token,
        })
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.id_to_token[id as usize]
    }

    /// Normalizes text and maps each word to its id; out-of-vocabulary
    /// words map to [`UNK`]. An empty string yields an empty sequence.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        split_words(text)
            .into_iter()
            .map(|w| self.token_to_id.get(&w).copied().unwrap_or(UNK))
            .collect()
    }

    /// Inverse of [`Self::tokenize`] for in-vocabulary text: reproduces the
    /// normalized (lowercased, space-joined) form.
    pub fn detokenize(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
