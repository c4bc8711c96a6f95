use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{DatasetError, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const SEP_TOKEN: &str = "[SEP]";

/// Vocabulary plus the reserved ids and fixed sequence length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerSpec {
    vocab: BTreeMap<String, u32>,
    vocab_size: usize,
    pad: u32,
    unk: u32,
    sep: u32,
    max_len: usize,
}

impl TokenizerSpec {
    pub fn new(
        vocab: BTreeMap<String, u32>,
        vocab_size: usize,
        pad: u32,
        unk: u32,
        sep: u32,
        max_len: usize,
    ) -> Result<Self> {
        if pad == unk || pad == sep || unk == sep {
            return Err(DatasetError::Contract("reserved token ids must be distinct".into()));
        }
        if max_len == 0 {
            return Err(DatasetError::Contract("sequence length must be >= 1".into()));
        }
        let too_big = [pad, unk, sep]
            .into_iter()
            .chain(vocab.values().copied())
            .find(|&id| id as usize >= vocab_size);
        if let Some(id) = too_big {
            return Err(DatasetError::Contract(format!(
                "token id {id} outside vocabulary of {vocab_size}"
            )));
        }
        if vocab.values().any(|&id| id == pad || id == unk || id == sep) {
            return Err(DatasetError::Contract("vocabulary reuses a reserved id".into()));
        }
        Ok(Self {
            vocab,
            vocab_size,
            pad,
            unk,
            sep,
            max_len,
        })
    }

    /// Frequency-ordered vocabulary (ties broken alphabetically) capped at
    /// `cap` regular tokens, after the three reserved ids.
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>, cap: usize, max_len: usize) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in split_tokens(text) {
                if let Piece::Word(w) = tok {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(cap);
        let first = SEP_ID + 1;
        let vocab: BTreeMap<String, u32> = ranked
            .into_iter()
            .enumerate()
            .map(|(i, (w, _))| (w, first + i as u32))
            .collect();
        let size = first as usize + vocab.len();
        Self::new(vocab, size, PAD_ID, UNK_ID, SEP_ID, max_len)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn pad(&self) -> u32 {
        self.pad
    }

    pub fn unk(&self) -> u32 {
        self.unk
    }

    pub fn sep(&self) -> u32 {
        self.sep
    }

    pub fn vocab(&self) -> &BTreeMap<String, u32> {
        &self.vocab
    }
}

enum Piece {
    Word(String),
    Sep,
}

/// Lowercases and splits on whitespace; runs of alphanumerics form words and
/// every other symbol stands alone. `[SEP]` survives as a separator.
fn split_tokens(text: &str) -> Vec<Piece> {
    let lower = text.to_lowercase();
    let sep = SEP_TOKEN.to_lowercase();
    let mut out = Vec::new();
    for (i, chunk) in lower.split(sep.as_str()).enumerate() {
        if i > 0 {
            out.push(Piece::Sep);
        }
        let mut word = String::new();
        for c in chunk.chars() {
            if c.is_alphanumeric() {
                word.push(c);
                continue;
            }
            if !word.is_empty() {
                out.push(Piece::Word(std::mem::take(&mut word)));
            }
            if !c.is_whitespace() {
                out.push(Piece::Word(c.to_string()));
            }
        }
        if !word.is_empty() {
            out.push(Piece::Word(word));
        }
    }
    out
}

/// Maps text to exactly `spec.max_len()` ids: head-truncated, PAD on the right.
pub fn tokenize(text: &str, spec: &TokenizerSpec) -> Vec<u32> {
    let mut ids: Vec<u32> = split_tokens(text)
        .into_iter()
        .map(|p| match p {
            Piece::Sep => spec.sep,
            Piece::Word(w) => spec.vocab.get(&w).copied().unwrap_or(spec.unk),
        })
        .take(spec.max_len)
        .collect();
    ids.resize(spec.max_len, spec.pad);
    ids
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(max_len: usize) -> TokenizerSpec {
        let vocab = [("a".to_string(), 3), ("b".to_string(), 4)].into_iter().collect();
        TokenizerSpec::new(vocab, 5, PAD_ID, UNK_ID, SEP_ID, max_len).unwrap()
    }

    #[test]
    fn examples() {
        let spec = toy(5);
        assert_eq!(tokenize("", &spec), vec![PAD_ID; 5]);
        assert_eq!(tokenize("a [SEP] b", &spec), vec![3, 2, 4, 0, 0]);
        let long = vec!["a"; 15].join(" ") + " b";
        let ids = tokenize(&long, &spec);
        assert_eq!(ids, vec![3; 5]);
    }

    #[test]
    fn punctuation_case_and_unknowns() {
        let spec = toy(6);
        assert_eq!(tokenize("A,B zz", &spec), vec![3, UNK_ID, 4, UNK_ID, 0, 0]);
        assert_eq!(tokenize("a[sep]b", &spec), vec![3, 2, 4, 0, 0, 0]);
    }

    #[test]
    fn invariants_checked() {
        let vocab: BTreeMap<String, u32> = [("a".to_string(), 9)].into_iter().collect();
        assert!(TokenizerSpec::new(vocab.clone(), 5, 0, 1, 2, 4).is_err());
        assert!(TokenizerSpec::new(BTreeMap::new(), 5, 0, 0, 2, 4).is_err());
        let clash: BTreeMap<String, u32> = [("a".to_string(), 1)].into_iter().collect();
        assert!(TokenizerSpec::new(clash, 5, 0, 1, 2, 4).is_err());
    }

    #[test]
    fn corpus_vocab_is_frequency_ordered_and_capped() {
        let spec = TokenizerSpec::from_corpus(["b a b", "c b a"], 2, 4).unwrap();
        assert_eq!(spec.vocab().get("b"), Some(&3));
        assert_eq!(spec.vocab().get("a"), Some(&4));
        assert_eq!(spec.vocab().get("c"), None);
        assert_eq!(spec.vocab_size(), 5);
    }
}
