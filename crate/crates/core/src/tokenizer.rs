//! Word-level tokenizer over lowercased, whitespace-separated text.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const SEP: usize = 4;
/// First id assigned to a corpus word.
pub const FIRST_WORD_ID: usize = 5;

pub const UNK_TEXT: &str = "<unk>";
const SPECIAL_NAMES: [&str; FIRST_WORD_ID] = ["<pad>", UNK_TEXT, "<bos>", "<eos>", "<sep>"];

/// Id assignment for corpus words. Ids `0..5` are the specials
/// (PAD, UNK, BOS, EOS, SEP); words are numbered contiguously from 5.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: BTreeMap<String, usize>,
    id_to_token: Vec<String>,
}

/// Lowercase and split on runs of whitespace.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// `normalize_tokens` joined by single spaces.
pub fn normalize(text: &str) -> String {
    normalize_tokens(text).join(" ")
}

impl Vocab {
    /// Build a vocabulary from word tokens listed in id order, starting at id 5.
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut id_to_token: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        let mut token_to_id = BTreeMap::new();
        for w in words {
            let w: String = w.into();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Config(alloc::format!("invalid vocabulary word {w:?}")));
            }
            let id = id_to_token.len();
            if token_to_id.insert(w.clone(), id).is_some() {
                return Err(Error::Config(alloc::format!("duplicate vocabulary word {w:?}")));
            }
            id_to_token.push(w);
        }
        Ok(Self { token_to_id, id_to_token })
    }

    /// Total size including the specials.
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.len() == FIRST_WORD_ID
    }

    /// Corpus words in id order (ids 5 upward).
    pub fn words(&self) -> &[String] {
        &self.id_to_token[FIRST_WORD_ID..]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|t| {
                let lower = t.to_lowercase();
                self.token_to_id.get(&lower).copied().unwrap_or(UNK)
            })
            .collect()
    }

    /// Space-joined tokens; PAD, BOS, EOS and SEP are dropped and UNK renders
    /// as `<unk>`.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut parts: Vec<&str> = Vec::with_capacity(ids.len());
        for &id in ids {
            if id >= self.len() {
                return Err(Error::Index { what: "token", index: id, bound: self.len() });
            }
            match id {
                PAD | BOS | EOS | SEP => {}
                UNK => parts.push(UNK_TEXT),
                _ => parts.push(&self.id_to_token[id]),
            }
        }
        Ok(parts.join(" "))
    }
}

/// Count words, keep those seen at least `min_freq` times, rank by
/// (frequency desc, word asc) and keep the first `max_size − 5`.
pub fn build_vocab<S: AsRef<str>>(texts: &[S], min_freq: usize, max_size: usize) -> Result<Vocab> {
    if max_size <= FIRST_WORD_ID {
        return Err(Error::Config(alloc::format!(
            "max_size must be at least {}, got {max_size}",
            FIRST_WORD_ID + 1
        )));
    }
    if min_freq == 0 {
        return Err(Error::Config("min_freq must be at least 1".into()));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for text in texts {
        for tok in normalize_tokens(text.as_ref()) {
            if SPECIAL_NAMES.contains(&tok.as_str()) {
                continue;
            }
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
    // BTreeMap iteration is already word-ascending; the stable sort keeps that
    // order among equal counts.
    ranked.sort_by(|a, b| b.1.cmp(&a.1));
    ranked.truncate(max_size - FIRST_WORD_ID);
    Vocab::from_words(ranked.into_iter().map(|(w, _)| w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn frequency_order() {
        let v = build_vocab(&["a a b"], 1, 100).unwrap();
        assert_eq!(v.id("a"), Some(5));
        assert_eq!(v.id("b"), Some(6));
        assert_eq!(v.len(), 7);
    }

    #[test]
    fn min_freq_threshold() {
        let v = build_vocab(&["x y", "y"], 2, 100).unwrap();
        assert_eq!(v.words(), &["y".to_string()]);
    }

    #[test]
    fn lexicographic_tie_break() {
        let v = build_vocab(&["b a"], 1, 100).unwrap();
        assert_eq!(v.id("a"), Some(5));
        assert_eq!(v.id("b"), Some(6));
    }

    #[test]
    fn truncates_to_max_size() {
        let v = build_vocab(&["c c c b b a d"], 1, 7).unwrap();
        assert_eq!(v.words(), &["c".to_string(), "b".to_string()]);
        assert_eq!(v.len(), 7);
    }

    #[test]
    fn bad_arguments() {
        assert_eq!(build_vocab::<&str>(&[], 1, 10).unwrap_err(), Error::EmptyCorpus);
        assert_eq!(build_vocab(&["  "], 1, 10).unwrap_err(), Error::EmptyCorpus);
        assert!(matches!(build_vocab(&["a"], 1, 5), Err(Error::Config(_))));
    }

    #[test]
    fn encode_folds_case_and_whitespace_runs() {
        let v = Vocab::from_words(["a"]).unwrap();
        assert_eq!(v.encode("A  a"), vec![5, 5]);
        assert_eq!(v.encode("a q"), vec![5, UNK]);
        assert_eq!(v.encode(""), Vec::<usize>::new());
    }

    #[test]
    fn decode_strips_specials_and_renders_unk() {
        let v = Vocab::from_words(["a"]).unwrap();
        assert_eq!(v.decode(&[BOS, 5, EOS]).unwrap(), "a");
        assert_eq!(v.decode(&[UNK]).unwrap(), "<unk>");
        assert_eq!(v.decode(&[PAD, SEP]).unwrap(), "");
        assert_eq!(
            v.decode(&[6]).unwrap_err(),
            Error::Index { what: "token", index: 6, bound: 6 }
        );
    }

    #[test]
    fn specials_are_never_words() {
        let v = build_vocab(&["hello <unk> world <sep>"], 1, 100).unwrap();
        assert_eq!(v.len(), 7);
        for id in 0..FIRST_WORD_ID {
            let t = v.token(id).unwrap();
            assert!(v.id(t).is_none(), "{t} maps to a word id");
        }
    }

    proptest! {
        #[test]
        fn roundtrip_of_in_vocab_text(words in proptest::collection::vec("[a-zA-Z?.,']{1,6}", 0..12),
                                      seps in proptest::collection::vec("[ \t\n]{1,3}", 12)) {
            let mut text = String::new();
            for (w, s) in words.iter().zip(&seps) {
                text.push_str(w);
                text.push_str(s);
            }
            let v = build_vocab(&[text.as_str(), "filler"], 1, 10_000).unwrap();
            prop_assert_eq!(v.decode(&v.encode(&text)).unwrap(), normalize(&text));
        }

        #[test]
        fn build_is_deterministic(texts in proptest::collection::vec("[a-d ]{0,20}", 1..6)) {
            let a = build_vocab(&texts, 1, 8);
            let b = build_vocab(&texts, 1, 8);
            prop_assert_eq!(a, b);
        }
    }
}
