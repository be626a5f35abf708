//! Word-level vocabulary and reversible tokenization.

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Default maximum sequence length, framing included.
pub const DEFAULT_MAX_LEN: usize = 32;

/// Lowercases and splits on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    to_id: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Keeps every token seen at least `min_count` times. Ids are assigned by
    /// descending frequency, ties broken lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for tok in normalize(line.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut entries: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !RESERVED.contains(&t.as_str()))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_tokens(entries.into_iter().map(|(t, _)| t)))
    }

    /// Builds from non-reserved tokens in id order (first gets id 4).
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let to_id = all.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { to_id, tokens: all }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    /// One token per line; line `i` holds id `i + 4`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for w in self.words() {
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Self {
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()).map(str::to_string))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_text(&text))
    }

    /// SHA-256 of the persisted text form, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn encode(&self, text: &str, add_framing: bool) -> TokenSequence {
        self.encode_with_max(text, add_framing, DEFAULT_MAX_LEN)
    }

    /// Tokenizes `text`; over-long input is truncated and the sequence records
    /// the original length.
    pub fn encode_with_max(&self, text: &str, add_framing: bool, max_len: usize) -> TokenSequence {
        let mut ids: Vec<usize> = normalize(text).iter().map(|t| self.id(t)).collect();
        let budget = max_len.saturating_sub(if add_framing { 2 } else { 0 });
        let mut truncated_from = None;
        if ids.len() > budget {
            log::warn!(
                "truncating sequence of {} tokens to {budget}: {text:?}",
                ids.len()
            );
            truncated_from = Some(ids.len());
            ids.truncate(budget);
        }
        if add_framing {
            ids.insert(0, BOS);
            ids.push(EOS);
        }
        TokenSequence {
            ids,
            framed: add_framing,
            truncated_from,
        }
    }

    /// Joins tokens with single spaces, skipping padding and framing and
    /// stopping at the first end marker after content.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut words = Vec::new();
        for &id in ids {
            match id {
                PAD | BOS => continue,
                EOS => break,
                _ => words.push(self.token(id).unwrap_or(RESERVED[UNK])),
            }
        }
        words.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub framed: bool,
    /// Token count before truncation, when truncation happened.
    pub truncated_from: Option<usize>,
}

impl TokenSequence {
    /// Content ids without BOS/EOS framing.
    pub fn content(&self) -> &[usize] {
        if self.framed {
            &self.ids[1..self.ids.len() - 1]
        } else {
            &self.ids
        }
    }
}
