//! Shared fixtures: synthetic corpora with known ground truth, trained small
//! models, and the encodings both integration suites need.

// compiled once per test target; not every target uses every helper
#![allow(dead_code)]

use std::sync::Arc;

use gradlens::models::{
    build_bow_mlp, build_text_cnn, train, BowMlpConfig, EncodedDataset, TextCnnConfig, TrainConfig,
    TrainedModel,
};
use gradlens::text::{
    encode_bow, encode_sequence, generate_synthetic_corpus, tokenize, BowVector, SyntheticCorpus,
    SyntheticSpec, TokenSequence, Vocabulary,
};

pub struct BowHarness {
    pub model: TrainedModel,
    pub corpus: SyntheticCorpus,
    pub test_bows: Vec<BowVector>,
    pub test_data: EncodedDataset,
}

/// Bag-of-words ground-truth harness: 3000 examples, 10 + 10 planted words,
/// 2000/1000 train/test split.
pub fn train_synthetic_bow(seed: u64) -> BowHarness {
    let corpus = generate_synthetic_corpus(&SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    })
    .expect("feasible spec");
    let (train_split, test_split) = corpus.examples.split_at(2000);
    let vocab = Vocabulary::build(train_split, 122).expect("non-empty corpus");
    let train_data = EncodedDataset::from_bow(train_split, &vocab);
    let test_data = EncodedDataset::from_bow(test_split, &vocab);

    let model = build_bow_mlp(BowMlpConfig::new(vocab.len()), vocab.clone(), seed).unwrap();
    let config = TrainConfig {
        seed,
        ..TrainConfig::for_bow_mlp()
    };
    let model = train(model, &train_data, &config).expect("training");

    let test_bows: Vec<BowVector> = test_split
        .iter()
        .map(|e| encode_bow(&tokenize(&e.text), &vocab))
        .collect();
    BowHarness {
        model,
        test_bows,
        test_data,
        corpus,
    }
}

pub const CNN_SEQ_LEN: usize = 48;

pub struct CnnHarness {
    pub model: TrainedModel,
    pub corpus: SyntheticCorpus,
    pub test_sequences: Vec<TokenSequence>,
    pub test_data: EncodedDataset,
}

/// Sequence ground-truth harness: every sentence carries exactly one trigger
/// token (positive or negative) that decides the label.
pub fn train_synthetic_cnn(seed: u64) -> CnnHarness {
    let corpus = generate_synthetic_corpus(&SyntheticSpec {
        seed,
        n_examples: 1500,
        n_planted_positive: 1,
        n_planted_negative: 1,
        vocabulary_size: 50,
        length_range: (15, 40),
    })
    .expect("feasible spec");
    let (train_split, test_split) = corpus.examples.split_at(1000);
    let vocab = Vocabulary::build(train_split, 52).expect("non-empty corpus");
    let train_data = EncodedDataset::from_sequences(train_split, &vocab, CNN_SEQ_LEN);
    let test_data = EncodedDataset::from_sequences(test_split, &vocab, CNN_SEQ_LEN);

    let config = TextCnnConfig {
        sequence_length: CNN_SEQ_LEN,
        vocabulary_size: vocab.len(),
        embedding_dim: 24,
        filter_count: 48,
        filter_width: 3,
    };
    let model = build_text_cnn(config, vocab.clone(), seed).unwrap();
    let train_config = TrainConfig {
        seed,
        epochs: 10,
        ..TrainConfig::for_text_cnn()
    };
    let model = train(model, &train_data, &train_config).expect("training");

    let test_sequences: Vec<TokenSequence> = test_split
        .iter()
        .map(|e| encode_sequence(&tokenize(&e.text), &vocab, CNN_SEQ_LEN))
        .collect();
    CnnHarness {
        model,
        test_sequences,
        test_data,
        corpus,
    }
}

/// Vocabulary of a given total size filled with generated words w0, w1, ...
pub fn dummy_vocab(size: usize) -> Vocabulary {
    let words: Vec<String> = ["<pad>".to_owned(), "<unk>".to_owned()]
        .into_iter()
        .chain((0..size - 2).map(|i| format!("w{i}")))
        .collect();
    Vocabulary::from_words(words).unwrap()
}

/// A bag-of-words MLP that computes exactly `beta . x` for binary inputs:
/// one ReLU path is kept always-active by a bias large enough to cover any
/// input, and the final bias cancels the offset. The input gradient is the
/// bare chain product w1 * w2 * w3 along that path, so it equals beta to the
/// last bit.
pub fn exact_linear_bow_model(beta: &[f64], vocab: Vocabulary) -> TrainedModel {
    let p = beta.len();
    assert_eq!(p, vocab.len());
    let mut config = BowMlpConfig::new(p);
    config.hidden_sizes = vec![4, 3];
    let mut model = build_bow_mlp(config, vocab, 0).unwrap();

    let margin = 10.0 + beta.iter().map(|b| b.abs()).sum::<f64>();
    let values: Vec<Vec<f64>> = vec![
        {
            let mut w = vec![0.0; p * 4];
            for (i, &b) in beta.iter().enumerate() {
                w[i * 4] = b;
            }
            w
        },
        vec![margin; 4],
        {
            let mut w = vec![0.0; 4 * 3];
            w[0] = 1.0;
            w
        },
        vec![margin; 3],
        vec![1.0, 0.0, 0.0],
        vec![-2.0 * margin],
    ];
    for (param, data) in model.params.iter_mut().zip(values) {
        Arc::make_mut(param).data_mut().copy_from_slice(&data);
    }
    model
}
