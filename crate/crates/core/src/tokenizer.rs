//! Lowercased whitespace tokenization with a frequency-ordered vocabulary.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::corpus::{Corpus, Split};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const UNK: usize = 2;
const RESERVED: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i + RESERVED))
            .collect();
        Self { tokens, ids }
    }

    /// Vocabulary size including the reserved ids.
    pub fn len(&self) -> usize {
        self.tokens.len() + RESERVED
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        match id {
            PAD => Some("[PAD]"),
            CLS => Some("[CLS]"),
            UNK => Some("[UNK]"),
            _ => self.tokens.get(id - RESERVED).map(String::as_str),
        }
    }

    /// One token per line; line `k` holds id `k + 3`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(out, "{t}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = fs::read_to_string(path)?;
        let tokens: Vec<String> = content.lines().map(str::to_owned).collect();
        let mut seen = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Format(format!("vocab line {}: invalid token {t:?}", i + 1)));
            }
            if seen.insert(t.as_str(), i).is_some() {
                return Err(Error::Format(format!("vocab line {}: duplicate token {t}", i + 1)));
            }
        }
        Ok(Self::from_tokens(tokens))
    }
}

pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Vocabulary over the training split, tokens with frequency `>= min_freq`
/// ordered by (frequency desc, token asc).
pub fn build_vocab(corpus: &Corpus, min_freq: usize) -> Vocab {
    build_vocab_from_texts(corpus.split(Split::Train).iter().map(|r| r.text.as_str()), min_freq)
}

pub fn build_vocab_from_texts<'a>(texts: impl Iterator<Item = &'a str>, min_freq: usize) -> Vocab {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in texts {
        for tok in tokenize(text) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut entries: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, n)| *n >= min_freq.max(1))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocab::from_tokens(entries.into_iter().map(|(t, _)| t).collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedDoc {
    /// `[CLS]`, content ids, then `[PAD]` up to the maximum length.
    pub ids: Vec<usize>,
    /// True exactly at real-word positions.
    pub content_flags: Vec<bool>,
    pub n_content: usize,
    /// Words in the untruncated text.
    pub n_words: usize,
}

impl TokenizedDoc {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.n_content == 0
    }

    pub fn is_truncated(&self) -> bool {
        self.n_words > self.n_content
    }

    pub fn is_pad(&self, pos: usize) -> bool {
        self.ids[pos] == PAD
    }
}

/// Encodes `[CLS]` plus the first `max_len - 1` words, padded to `max_len`.
pub fn encode(text: &str, vocab: &Vocab, max_len: usize) -> Result<TokenizedDoc> {
    if max_len < 2 {
        return Err(Error::InvalidParam(format!("max_len must be >= 2, got {max_len}")));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    let mut n_words = 0;
    for tok in tokenize(text) {
        n_words += 1;
        if ids.len() < max_len {
            ids.push(vocab.id(&tok));
        }
    }
    let n_content = ids.len() - 1;
    ids.resize(max_len, PAD);
    let content_flags = (0..max_len).map(|i| i >= 1 && i <= n_content).collect();
    Ok(TokenizedDoc {
        ids,
        content_flags,
        n_content,
        n_words,
    })
}
