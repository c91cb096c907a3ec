//! Corpus ingestion and the two text encodings the classifiers consume:
//! binary bag-of-words vectors and fixed-length padded index sequences.

mod imdb;
mod synthetic;
mod vocab;

pub use imdb::load_imdb;
pub use synthetic::{generate_synthetic_corpus, SyntheticCorpus, SyntheticSpec};
pub use vocab::{Vocabulary, PAD_INDEX, PAD_TOKEN, UNK_INDEX, UNK_TOKEN};

use std::sync::OnceLock;

use regex::Regex;

/// A raw example: review text plus binary sentiment (0 negative, 1 positive).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    pub text: String,
    pub label: u8,
}

impl LabeledExample {
    pub fn new(text: impl Into<String>, label: u8) -> Self {
        debug_assert!(label <= 1);
        LabeledExample {
            text: text.into(),
            label,
        }
    }
}

fn line_break_markup() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)<br\s*/?\s*>").expect("static pattern"))
}

/// Lowercase and split on runs of non-alphanumeric characters, after removing
/// HTML line-break markup. Never yields empty tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let stripped = line_break_markup().replace_all(text, " ");
    stripped
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Binary presence vector over the vocabulary, stored sparsely as the sorted
/// indices of the entries that are 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BowVector {
    size: usize,
    ones: Vec<u32>,
}

impl BowVector {
    /// Build directly from the indices that are set. Indices are sorted and
    /// deduplicated; out-of-range entries are rejected.
    pub fn from_ones(size: usize, mut ones: Vec<u32>) -> crate::error::Result<Self> {
        ones.sort_unstable();
        ones.dedup();
        if let Some(&last) = ones.last() {
            if last as usize >= size {
                return Err(crate::error::Error::DimensionMismatch(format!(
                    "indicator index {last} outside vector of size {size}"
                )));
            }
        }
        Ok(BowVector { size, ones })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Sorted indices of the present words (may include the unknown slot,
    /// never the pad slot).
    pub fn ones(&self) -> &[u32] {
        &self.ones
    }

    pub fn contains(&self, index: usize) -> bool {
        self.ones.binary_search(&(index as u32)).is_ok()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut dense = vec![0.0; self.size];
        for &i in &self.ones {
            dense[i as usize] = 1.0;
        }
        dense
    }
}

/// Indicator encoding: entry d is 1 iff word d occurs in the tokens. Words
/// outside the vocabulary set the unknown indicator; the pad slot stays 0.
pub fn encode_bow(tokens: &[String], vocab: &Vocabulary) -> BowVector {
    let mut ones: Vec<u32> = tokens.iter().map(|t| vocab.lookup(t) as u32).collect();
    ones.sort_unstable();
    ones.dedup();
    BowVector {
        size: vocab.len(),
        ones,
    }
}

/// Fixed-length index sequence. Shorter inputs are pre-padded with the pad
/// index, longer ones keep their last `len` tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    indices: Vec<u32>,
    effective_len: usize,
}

impl TokenSequence {
    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Number of non-pad positions (the trailing part of the sequence).
    pub fn effective_len(&self) -> usize {
        self.effective_len
    }

    pub fn pad_count(&self) -> usize {
        self.indices.len() - self.effective_len
    }
}

pub fn encode_sequence(tokens: &[String], vocab: &Vocabulary, len: usize) -> TokenSequence {
    assert!(len >= 1, "sequence length must be at least 1");
    let mapped = tokens.iter().map(|t| vocab.lookup(t) as u32);
    let indices: Vec<u32> = if tokens.len() >= len {
        mapped.skip(tokens.len() - len).collect()
    } else {
        std::iter::repeat_n(PAD_INDEX as u32, len - tokens.len())
            .chain(mapped)
            .collect()
    };
    TokenSequence {
        effective_len: tokens.len().min(len),
        indices,
    }
}
