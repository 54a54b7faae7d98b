//! Token/id mapping with reserved PAD/UNK/BOS/EOS entries.
//!
//! Vocabulary files are UTF-8 text, one `token<TAB>count` per line; line
//! order defines the ids following the four reserved entries.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;

const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from (token, count) pairs: most frequent first,
    /// ties broken lexicographically, truncated so the total size
    /// (including the 4 reserved entries) stays within `max_size`.
    pub fn from_counts(counts: impl IntoIterator<Item = (String, u64)>, max_size: usize) -> Result<Self> {
        if max_size <= RESERVED.len() {
            return Err(Error::Vocab(format!(
                "max size {max_size} leaves no room beyond the {} reserved entries",
                RESERVED.len()
            )));
        }
        let mut items: Vec<(String, u64)> = counts.into_iter().collect();
        items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        items.truncate(max_size - RESERVED.len());

        let mut vocab = Vocabulary {
            tokens: RESERVED.iter().map(|s| s.to_string()).collect(),
            counts: vec![0; RESERVED.len()],
            index: RESERVED
                .iter()
                .enumerate()
                .map(|(i, s)| (s.to_string(), i as u32))
                .collect(),
        };
        for (token, count) in items {
            vocab.push(token, count)?;
        }
        Ok(vocab)
    }

    /// Counts tokens over whitespace-tokenized sentences and builds the
    /// vocabulary from them.
    pub fn build(sentences: &[Vec<String>], max_size: usize) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::Vocab("cannot build vocabulary from empty corpus".into()));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for sent in sentences {
            for tok in sent {
                *counts.entry(tok.clone()).or_insert(0) += 1;
            }
        }
        Self::from_counts(counts, max_size)
    }

    fn push(&mut self, token: String, count: u64) -> Result<()> {
        if token.chars().any(char::is_whitespace) || token.is_empty() {
            return Err(Error::Vocab(format!("invalid token {token:?}")));
        }
        if self.index.contains_key(&token) {
            return Err(Error::Vocab(format!("duplicate token {token:?}")));
        }
        let id = self.tokens.len() as u32;
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        self.counts.push(count);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved entries are always present
    }

    /// Token id, or UNK for out-of-vocabulary tokens.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Joins non-reserved ids back into a space-separated sentence.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id >= RESERVED.len() as u32 || id == UNK)
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for i in RESERVED.len()..self.tokens.len() {
            out.push_str(&format!("{}\t{}\n", self.tokens[i], self.counts[i]));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut vocab = Vocabulary {
            tokens: RESERVED.iter().map(|s| s.to_string()).collect(),
            counts: vec![0; RESERVED.len()],
            index: RESERVED
                .iter()
                .enumerate()
                .map(|(i, s)| (s.to_string(), i as u32))
                .collect(),
        };
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (token, count) = line.split_once('\t').ok_or_else(|| {
                Error::Vocab(format!(
                    "{}:{}: expected token<TAB>count",
                    path.display(),
                    lineno + 1
                ))
            })?;
            let count: u64 = count.parse().map_err(|_| {
                Error::Vocab(format!(
                    "{}:{}: invalid count {count:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            vocab.push(token.to_string(), count)?;
        }
        Ok(vocab)
    }
}
