use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const MASK_ID: usize = 4;

pub const RESERVED_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Word-level vocabulary with dense ids. Ids 0..5 are reserved; corpus words
/// always map at 5 and above.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Most frequent corpus words, capped at `max_size` ids including the
    /// five reserved ones. Frequency ties break lexicographically.
    pub fn build(corpus: &str, max_size: usize) -> Result<Vocab> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for word in corpus.split_whitespace() {
            if RESERVED_TOKENS.contains(&word) {
                continue;
            }
            *counts.entry(word).or_insert(0) += 1;
        }
        if counts.is_empty() {
            return Err(Error::InvalidConfig("empty corpus".into()));
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut id_to_token: Vec<String> =
            RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let budget = max_size.saturating_sub(RESERVED_TOKENS.len());
        id_to_token.extend(ranked.iter().take(budget).map(|(w, _)| w.to_string()));

        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab {
            token_to_id,
            id_to_token,
        })
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    /// Ids of real words, excluding the reserved range.
    pub fn word_ids(&self) -> std::ops::Range<usize> {
        RESERVED_TOKENS.len()..self.size()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(|s| s.as_str())
    }

    pub fn tokenize(&self, sentence: &str) -> Vec<usize> {
        sentence.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; the line number is the id.
    pub fn to_file_format(&self) -> String {
        let mut s = self.id_to_token.join("\n");
        s.push('\n');
        s
    }

    pub fn from_file_format(text: &str) -> Result<Vocab> {
        let id_to_token: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if id_to_token.len() < RESERVED_TOKENS.len() {
            return Err(Error::Format("vocab file shorter than reserved range".into()));
        }
        for (i, reserved) in RESERVED_TOKENS.iter().enumerate() {
            if id_to_token[i] != *reserved {
                return Err(Error::Format(format!(
                    "vocab line {i} is {:?}, expected reserved token {reserved:?}",
                    id_to_token[i]
                )));
            }
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab {
            token_to_id,
            id_to_token,
        })
    }
}
