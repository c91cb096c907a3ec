//! Synthetic labeled corpus with planted sentiment words.
//!
//! Every example is filler text carrying a subset of known "positive" and
//! "negative" trigger words (each at most once), and the label is decided by
//! which side has the strict majority; ties are discarded and regenerated.
//! Because each trigger appears at most once, presence equals occurrence
//! count and a bag-of-words model can recover the rule exactly, which makes
//! the corpus a ground-truth harness for attribution tests.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::text::LabeledExample;

/// Probability that a given planted word is included in an example.
const PLANT_PROB: f64 = 0.3;
const MAX_ATTEMPTS_PER_EXAMPLE: usize = 10_000;

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_examples: usize,
    pub n_planted_positive: usize,
    pub n_planted_negative: usize,
    /// Total number of distinct words, planted ones included.
    pub vocabulary_size: usize,
    /// Inclusive token-count range per example.
    pub length_range: (usize, usize),
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 42,
            n_examples: 3000,
            n_planted_positive: 10,
            n_planted_negative: 10,
            vocabulary_size: 120,
            length_range: (20, 60),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub examples: Vec<LabeledExample>,
    pub positive_words: Vec<String>,
    pub negative_words: Vec<String>,
}

pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    let planted = spec.n_planted_positive + spec.n_planted_negative;
    if spec.n_planted_positive < 1 || spec.n_planted_negative < 1 {
        return Err(Error::InfeasibleParameters(
            "need at least one planted word per class".into(),
        ));
    }
    if spec.vocabulary_size <= planted {
        return Err(Error::InfeasibleParameters(format!(
            "vocabulary size {} leaves no filler words beyond {} planted ones",
            spec.vocabulary_size, planted
        )));
    }
    let (min_len, max_len) = spec.length_range;
    if min_len < 1 || min_len > max_len {
        return Err(Error::InfeasibleParameters(format!(
            "bad length range {min_len}..={max_len}"
        )));
    }

    let positive_words: Vec<String> = (0..spec.n_planted_positive)
        .map(|i| format!("pos{i:03}"))
        .collect();
    let negative_words: Vec<String> = (0..spec.n_planted_negative)
        .map(|i| format!("neg{i:03}"))
        .collect();
    let filler_words: Vec<String> = (0..spec.vocabulary_size - planted)
        .map(|i| format!("filler{i:04}"))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut examples = Vec::with_capacity(spec.n_examples);
    for _ in 0..spec.n_examples {
        examples.push(generate_example(
            &mut rng,
            &positive_words,
            &negative_words,
            &filler_words,
            min_len,
            max_len,
        )?);
    }

    Ok(SyntheticCorpus {
        examples,
        positive_words,
        negative_words,
    })
}

fn generate_example(
    rng: &mut ChaCha8Rng,
    positive: &[String],
    negative: &[String],
    filler: &[String],
    min_len: usize,
    max_len: usize,
) -> Result<LabeledExample> {
    for _ in 0..MAX_ATTEMPTS_PER_EXAMPLE {
        let len = rng.gen_range(min_len..=max_len);
        let pos_chosen: Vec<&String> = positive
            .iter()
            .filter(|_| rng.gen_bool(PLANT_PROB))
            .collect();
        let neg_chosen: Vec<&String> = negative
            .iter()
            .filter(|_| rng.gen_bool(PLANT_PROB))
            .collect();
        if pos_chosen.len() == neg_chosen.len() || pos_chosen.len() + neg_chosen.len() > len {
            continue;
        }
        let label = u8::from(pos_chosen.len() > neg_chosen.len());

        let mut tokens: Vec<&String> = (0..len)
            .map(|_| &filler[rng.gen_range(0..filler.len())])
            .collect();
        let mut slots: Vec<usize> = (0..len).collect();
        slots.shuffle(rng);
        for (slot, word) in slots.iter().zip(pos_chosen.iter().chain(&neg_chosen)) {
            tokens[*slot] = *word;
        }

        let text = tokens
            .iter()
            .map(|t| t.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        return Ok(LabeledExample { text, label });
    }
    Err(Error::InfeasibleParameters(
        "could not produce an example with a strict planted-word majority".into(),
    ))
}
