use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::text::{tokenize, LabeledExample};

pub const PAD_INDEX: usize = 0;
pub const UNK_INDEX: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Frequency-ranked word table with reserved pad and unknown slots.
///
/// Index 0 is padding, index 1 the unknown word; corpus words occupy indices
/// 2.. in non-increasing frequency order, ties broken lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Count tokens over the corpus and keep the `capacity - 2` most frequent.
    pub fn build(corpus: &[LabeledExample], capacity: usize) -> Result<Self> {
        if capacity < 3 {
            return Err(Error::InvalidConfig(format!(
                "vocabulary capacity {capacity} leaves no room for words"
            )));
        }
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for example in corpus {
            for token in tokenize(&example.text) {
                *counts.entry(token).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|(wa, ca), (wb, cb)| cb.cmp(ca).then_with(|| wa.cmp(wb)));
        ranked.truncate(capacity - 2);

        let words: Vec<String> = [PAD_TOKEN.to_owned(), UNK_TOKEN.to_owned()]
            .into_iter()
            .chain(ranked.into_iter().map(|(w, _)| w))
            .collect();
        Ok(Self::from_words_unchecked(words))
    }

    /// Rebuild from an index-ordered word list (line i of the serialized
    /// form). Validates the reserved slots and word uniqueness.
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < 2 || words[PAD_INDEX] != PAD_TOKEN || words[UNK_INDEX] != UNK_TOKEN {
            return Err(Error::CorruptVocabulary(format!(
                "first two entries must be \"{PAD_TOKEN}\" and \"{UNK_TOKEN}\""
            )));
        }
        let mut seen = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if let Some(prev) = seen.insert(w.clone(), i) {
                return Err(Error::CorruptVocabulary(format!(
                    "word {w:?} appears at both index {prev} and {i}"
                )));
            }
        }
        Ok(Self::from_words_unchecked(words))
    }

    fn from_words_unchecked(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocabulary { words, index }
    }

    /// Total size including the two reserved slots.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Index of a corpus word; `None` when out of vocabulary.
    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Index of a word, falling back to the unknown slot.
    pub fn lookup(&self, word: &str) -> usize {
        self.index_of(word).unwrap_or(UNK_INDEX)
    }

    pub fn word(&self, index: usize) -> Option<&str> {
        self.words.get(index).map(String::as_str)
    }

    /// Newline-delimited UTF-8, line i holding word i.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = self.words.join("\n");
        body.push('\n');
        fs::write(path, body).map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|source| Error::UnreadableFile {
            path: path.to_owned(),
            source,
        })?;
        Self::from_words(body.lines().map(str::to_owned).collect())
    }
}
