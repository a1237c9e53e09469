//! Character-level tokenizer.
//!
//! A phoneme front end is out of scope; characters exercise the same
//! text-side machinery. Id 0 is reserved for unknown characters, so known
//! characters start at 1 and the embedding table has `vocab.size()` rows.

use crate::error::{Error, Result};

/// Reserved id for characters outside the vocabulary.
pub const UNK_ID: usize = 0;

/// Alphabet used when a corpus is generated rather than read from text.
const SYNTHETIC_ALPHABET: &str =
    "abcdefghijklmnopqrstuvwxyz0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ.,;:!?' -";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Vocab {
    /// Vocabulary of the distinct characters in `text`, in sorted order.
    pub fn from_text(text: &str) -> Self {
        let mut chars: Vec<char> = text.chars().collect();
        chars.sort_unstable();
        chars.dedup();
        Self { chars }
    }

    /// Rebuild from an explicit character list (manifest round trip).
    pub fn from_chars(chars: Vec<char>) -> Result<Self> {
        let mut seen = chars.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != chars.len() {
            return Err(Error::InvalidInput("vocabulary has duplicate characters".into()));
        }
        Ok(Self { chars })
    }

    /// Fixed vocabulary with `vocab_size − 1` characters plus the UNK slot,
    /// for corpora whose tokens are synthesized rather than read.
    pub fn synthetic(vocab_size: usize) -> Result<Self> {
        let alphabet: Vec<char> = SYNTHETIC_ALPHABET.chars().collect();
        if vocab_size < 4 {
            return Err(Error::InvalidArgument(format!(
                "vocab size {vocab_size} < 4"
            )));
        }
        if vocab_size - 1 > alphabet.len() {
            return Err(Error::InvalidArgument(format!(
                "vocab size {vocab_size} exceeds the synthetic alphabet ({} + UNK)",
                alphabet.len()
            )));
        }
        Ok(Self { chars: alphabet[..vocab_size - 1].to_vec() })
    }

    /// Number of ids, including UNK.
    pub fn size(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.chars()
            .map(|c| match self.chars.iter().position(|&v| v == c) {
                Some(i) => i + 1,
                None => UNK_ID,
            })
            .collect()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn as_string(&self) -> String {
        self.chars.iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_tokenizes_to_nothing() {
        let v = Vocab::from_text("ab");
        assert!(v.tokenize("").is_empty());
    }

    #[test]
    fn known_characters_map_in_sorted_order() {
        let v = Vocab::from_text("ba");
        assert_eq!(v.tokenize("ab"), [1, 2]);
        assert_eq!(v.size(), 3);
    }

    #[test]
    fn unknown_character_maps_to_unk() {
        let v = Vocab::from_text("ab");
        assert_eq!(v.tokenize("axb"), [1, UNK_ID, 2]);
    }

    #[test]
    fn synthetic_vocab_bounds() {
        assert!(Vocab::synthetic(3).is_err());
        let v = Vocab::synthetic(4).unwrap();
        assert_eq!(v.size(), 4);
        assert!(Vocab::synthetic(10_000).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let v = Vocab::from_text("hello world");
        let back = Vocab::from_chars(v.as_string().chars().collect()).unwrap();
        assert_eq!(v, back);
        assert!(Vocab::from_chars(vec!['a', 'a']).is_err());
    }
}
