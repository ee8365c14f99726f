//! Deterministic whitespace tokenizer with a fixed special-token set.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use thiserror::Error;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const SEP: TokenId = 4;

const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<sep>"];

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("token id {0} out of range (vocab size {1})")]
    IdOutOfRange(TokenId, usize),
    #[error("malformed vocabulary line {0}: expected token<TAB>id")]
    MalformedLine(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Immutable token <-> id bijection with contiguous ids starting at 0.
/// Ids 0-4 are the reserved PAD/BOS/EOS/UNK/SEP tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (i, token) in self.tokens.iter().enumerate() {
            writeln!(out, "{token}\t{i}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut tokens = Vec::new();
        for (lineno, line) in file.lines().enumerate() {
            let line = line?;
            let (token, id) =
                line.rsplit_once('\t').ok_or(VocabError::MalformedLine(lineno + 1))?;
            let id: usize = id.parse().map_err(|_| VocabError::MalformedLine(lineno + 1))?;
            if id != lineno {
                return Err(VocabError::MalformedLine(lineno + 1));
            }
            tokens.push(token.to_string());
        }
        Ok(Self::from_tokens(tokens))
    }

    /// Serializes to the same line format as [`Vocabulary::save`].
    pub fn to_lines(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{t}\t{i}\n"))
            .collect()
    }

    pub fn from_lines(text: &str) -> Result<Self, VocabError> {
        let mut tokens = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let (token, id) =
                line.rsplit_once('\t').ok_or(VocabError::MalformedLine(lineno + 1))?;
            let id: usize = id.parse().map_err(|_| VocabError::MalformedLine(lineno + 1))?;
            if id != lineno {
                return Err(VocabError::MalformedLine(lineno + 1));
            }
            tokens.push(token.to_string());
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// Builds a vocabulary over all whitespace tokens with frequency >= min_count,
/// ordered by (-frequency, token) after the five reserved tokens.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Vocabulary, VocabError> {
    if corpus.is_empty() {
        return Err(VocabError::EmptyCorpus);
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for text in corpus {
        for token in text.as_ref().split_whitespace() {
            *counts.entry(token).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> =
        counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(kept.into_iter().map(|(t, _)| t.to_string()));
    Ok(Vocabulary::from_tokens(tokens))
}

/// Whitespace-splits and maps tokens to ids; unknown tokens become UNK.
/// No BOS/EOS framing here; callers add specials.
pub fn encode(v: &Vocabulary, text: &str) -> Vec<TokenId> {
    text.split_whitespace()
        .map(|t| v.id(t).unwrap_or(UNK))
        .collect()
}

/// Joins tokens with single spaces, dropping PAD/BOS/EOS/SEP.
pub fn decode(v: &Vocabulary, ids: &[TokenId]) -> Result<String, VocabError> {
    let mut parts = Vec::new();
    for &id in ids {
        let token = v
            .token(id)
            .ok_or_else(|| VocabError::IdOutOfRange(id, v.len()))?;
        if !matches!(id, PAD | BOS | EOS | SEP) {
            parts.push(token);
        }
    }
    Ok(parts.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn builds_sorted_vocab() {
        let v = build_vocab(&["a b a"], 1).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.token(5), Some("a")); // frequency 2 first
        assert_eq!(v.token(6), Some("b"));
        let v2 = build_vocab(&["a b a"], 2).unwrap();
        assert_eq!(v2.len(), 6);
        assert_eq!(v2.id("b"), None);
    }

    #[test]
    fn build_is_deterministic() {
        let corpus = ["x y z z", "w y"];
        assert_eq!(build_vocab(&corpus, 1).unwrap(), build_vocab(&corpus, 1).unwrap());
    }

    #[test]
    fn ties_break_alphabetically() {
        let v = build_vocab(&["b a c"], 1).unwrap();
        assert_eq!(v.token(5), Some("a"));
        assert_eq!(v.token(6), Some("b"));
        assert_eq!(v.token(7), Some("c"));
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(build_vocab::<&str>(&[], 1).is_err());
    }

    #[test]
    fn encode_maps_unknowns_to_unk() {
        let v = build_vocab(&["a b"], 1).unwrap();
        assert_eq!(encode(&v, ""), Vec::<TokenId>::new());
        assert!(encode(&v, "a zzz b").contains(&UNK));
    }

    #[test]
    fn decode_strips_specials() {
        let v = build_vocab(&["a b"], 1).unwrap();
        let a = v.id("a").unwrap();
        assert_eq!(decode(&v, &[BOS, a, EOS]).unwrap(), "a");
        assert_eq!(decode(&v, &[]).unwrap(), "");
        assert!(decode(&v, &[99]).is_err());
    }

    #[test]
    fn round_trips_through_file() {
        let v = build_vocab(&["a b c a"], 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        v.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
        assert_eq!(Vocabulary::from_lines(&v.to_lines()).unwrap(), v);
    }

    proptest! {
        #[test]
        fn decode_encode_round_trip(words in proptest::collection::vec("[a-d]{1,3}", 0..8)) {
            let text = words.join(" ");
            let v = build_vocab(&[text.as_str(), "q"], 1).unwrap();
            let ids = encode(&v, &text);
            let decoded = decode(&v, &ids).unwrap();
            // Whitespace-normalized round trip for in-vocab text.
            prop_assert_eq!(decoded.split_whitespace().collect::<Vec<_>>(), words);
            prop_assert_eq!(encode(&v, &decoded), ids);
        }
    }
}
