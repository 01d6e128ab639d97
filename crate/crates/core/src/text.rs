//! Tokenization, vocabulary and the word-level SOMEONE translation rule.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

pub const START: &str = "START";
pub const END: &str = "END";
pub const UNK: &str = "UNK";
pub const SOMEONE: &str = "SOMEONE";

pub const START_ID: usize = 0;
pub const END_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const RESERVED: usize = 3;

/// Words rewritten to SOMEONE by [`translate_caption`].
pub const PERSON_WORDS: [&str; 5] = ["man", "woman", "person", "boy", "girl"];

/// Default frequency threshold for vocabulary entries.
pub const DEFAULT_MIN_COUNT: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum TextError {
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: usize, size: usize },
    #[error("min_count must be at least 1")]
    ZeroMinCount,
    #[error("invalid vocabulary: {0}")]
    Invalid(String),
}

const STRIPPED: [char; 7] = ['.', ',', '!', '?', '"', ';', ':'];

pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text.trim().chars().filter(|c| !STRIPPED.contains(c)).collect();
    cleaned
        .split_whitespace()
        .map(|t| if t == SOMEONE { t.to_string() } else { t.to_lowercase() })
        .collect()
}

/// Maps person nouns to SOMEONE, leaving every other token alone.
pub fn translate_caption<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    tokens
        .iter()
        .map(|t| {
            let t = t.as_ref();
            if PERSON_WORDS.contains(&t) {
                SOMEONE.to_string()
            } else {
                t.to_string()
            }
        })
        .collect()
}

/// Bidirectional word/id map with reserved START, END and UNK ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    counts: Vec<u64>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Vocabulary holding only the reserved tokens.
    pub fn reserved_only() -> Self {
        let words: Vec<String> = [START, END, UNK].iter().map(|s| s.to_string()).collect();
        let ids = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocabulary {
            words,
            counts: vec![0; RESERVED],
            ids,
        }
    }

    /// Rebuilds a vocabulary from `(word, count)` entries in id order.
    pub fn from_entries(entries: Vec<(String, u64)>) -> Result<Self, TextError> {
        if entries.len() < RESERVED {
            return Err(TextError::Invalid("missing reserved tokens".into()));
        }
        for (i, name) in [START, END, UNK].iter().enumerate() {
            if entries[i].0 != *name {
                return Err(TextError::Invalid(format!("id {i} must be {name}, found {}", entries[i].0)));
            }
        }
        let mut ids = HashMap::with_capacity(entries.len());
        let mut words = Vec::with_capacity(entries.len());
        let mut counts = Vec::with_capacity(entries.len());
        for (i, (w, c)) in entries.into_iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(TextError::Invalid(format!("bad word {w:?} at id {i}")));
            }
            if ids.insert(w.clone(), i).is_some() {
                return Err(TextError::Invalid(format!("duplicate word {w}")));
            }
            words.push(w);
            counts.push(c);
        }
        Ok(Vocabulary { words, counts, ids })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn count(&self, id: usize) -> Option<u64> {
        self.counts.get(id).copied()
    }

    /// `(word, count)` in id order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, u64)> {
        self.words.iter().map(String::as_str).zip(self.counts.iter().copied())
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(UNK_ID))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>, TextError> {
        ids.iter()
            .map(|&id| {
                self.word(id)
                    .map(str::to_string)
                    .ok_or(TextError::IdOutOfRange { id, size: self.len() })
            })
            .collect()
    }
}

/// Builds a vocabulary from tokenized captions.
///
/// Words seen at least `min_count` times get ids from 3 upward, most frequent
/// first, ties broken lexicographically. Reserved token names in the corpus
/// are not counted as ordinary words.
pub fn build_vocab<S: AsRef<str>>(captions: &[Vec<S>], min_count: usize) -> Result<Vocabulary, TextError> {
    if min_count == 0 {
        return Err(TextError::ZeroMinCount);
    }
    let mut freq: BTreeMap<&str, u64> = BTreeMap::new();
    for caption in captions {
        for t in caption {
            let t = t.as_ref();
            if t == START || t == END || t == UNK {
                continue;
            }
            *freq.entry(t).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, u64)> = freq.into_iter().filter(|&(_, c)| c >= min_count as u64).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let mut vocab = Vocabulary::reserved_only();
    for (w, c) in kept {
        vocab.ids.insert(w.to_string(), vocab.words.len());
        vocab.words.push(w.to_string());
        vocab.counts.push(c);
    }
    Ok(vocab)
}
