//! The two classifiers under study and their shared plumbing.
//!
//! `BowMlp` is a fully connected network with two ReLU hidden layers over a
//! binary bag-of-words vector. `TextCnn` embeds a padded index sequence,
//! applies a valid 1-d convolution over time, max-pools each channel and
//! finishes with a single affine unit. Both produce one pre-sigmoid score.

mod io;
mod train;

pub use io::{load_model, save_model, FORMAT_VERSION};
pub use train::{train, TrainConfig, TrainMetadata};

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::text::{BowVector, LabeledExample, TokenSequence, Vocabulary};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BowMlpConfig {
    pub input_size: usize,
    /// Exactly two hidden layer widths.
    pub hidden_sizes: Vec<usize>,
}

impl BowMlpConfig {
    pub fn new(input_size: usize) -> Self {
        BowMlpConfig {
            input_size,
            hidden_sizes: vec![250, 50],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 {
            return Err(Error::InvalidConfig("input size must be positive".into()));
        }
        if self.hidden_sizes.len() != 2 {
            return Err(Error::InvalidConfig(format!(
                "expected exactly two hidden layers, got {}",
                self.hidden_sizes.len()
            )));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::InvalidConfig("hidden sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextCnnConfig {
    pub sequence_length: usize,
    pub vocabulary_size: usize,
    pub embedding_dim: usize,
    pub filter_count: usize,
    pub filter_width: usize,
}

impl TextCnnConfig {
    pub fn new(vocabulary_size: usize) -> Self {
        TextCnnConfig {
            sequence_length: 400,
            vocabulary_size,
            embedding_dim: 50,
            filter_count: 250,
            filter_width: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            self.sequence_length,
            self.vocabulary_size,
            self.embedding_dim,
            self.filter_count,
            self.filter_width,
        ];
        if extents.contains(&0) {
            return Err(Error::InvalidConfig("all extents must be positive".into()));
        }
        if self.filter_width > self.sequence_length {
            return Err(Error::InvalidConfig(format!(
                "filter width {} exceeds sequence length {}",
                self.filter_width, self.sequence_length
            )));
        }
        Ok(())
    }

    /// Time extent of the valid convolution output.
    pub fn conv_output_len(&self) -> usize {
        self.sequence_length - self.filter_width + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Architecture {
    BowMlp(BowMlpConfig),
    TextCnn(TextCnnConfig),
}

impl Architecture {
    pub fn name(&self) -> &'static str {
        match self {
            Architecture::BowMlp(_) => "bow-mlp",
            Architecture::TextCnn(_) => "text-cnn",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::BowMlp(c) => c.validate(),
            Architecture::TextCnn(c) => c.validate(),
        }
    }

    /// Parameter tensor shapes in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            Architecture::BowMlp(c) => {
                let (h0, h1) = (c.hidden_sizes[0], c.hidden_sizes[1]);
                vec![
                    vec![c.input_size, h0],
                    vec![h0],
                    vec![h0, h1],
                    vec![h1],
                    vec![h1, 1],
                    vec![1],
                ]
            }
            Architecture::TextCnn(c) => vec![
                vec![c.vocabulary_size, c.embedding_dim],
                vec![c.filter_count, c.filter_width, c.embedding_dim],
                vec![c.filter_count],
                vec![c.filter_count, 1],
                vec![1],
            ],
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }
}

/// How each parameter tensor is filled at build time.
enum Init {
    /// Uniform in +-sqrt(6 / (fan_in + fan_out)).
    Glorot {
        fan_in: usize,
        fan_out: usize,
    },
    /// Uniform in +-0.05 (embedding table).
    Embedding,
    Zero,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub arch: Architecture,
    /// Parameter tensors in `Architecture::param_shapes` order, shared so
    /// that per-example tapes can reference them without copying.
    pub params: Vec<Arc<Tensor>>,
    pub vocab: Vocabulary,
    pub metadata: Option<TrainMetadata>,
}

/// Probability together with the pre-sigmoid score it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub probability: f64,
    pub score: f64,
}

impl Prediction {
    pub fn thresholded(&self) -> u8 {
        u8::from(self.probability > 0.5)
    }
}

/// Node handles of one bag-of-words forward pass.
pub struct BowForward {
    pub params: Vec<NodeId>,
    pub input: NodeId,
    /// Pre-activations of the two hidden layers, for ReLU-kink inspection.
    pub preact1: NodeId,
    pub preact2: NodeId,
    pub score: NodeId,
}

/// Node handles of one convolution forward pass.
pub struct CnnForward {
    pub params: Vec<NodeId>,
    /// Gathered embedding rows, the tensor the attribution gradient targets.
    pub embedded: NodeId,
    pub conv: NodeId,
    pub pooled: NodeId,
    pub score: NodeId,
}

pub fn build_bow_mlp(config: BowMlpConfig, vocab: Vocabulary, seed: u64) -> Result<TrainedModel> {
    config.validate()?;
    if config.input_size != vocab.len() {
        return Err(Error::InvalidConfig(format!(
            "input size {} does not match vocabulary size {}",
            config.input_size,
            vocab.len()
        )));
    }
    let arch = Architecture::BowMlp(config);
    let params = init_params(&arch, seed);
    Ok(TrainedModel {
        arch,
        params,
        vocab,
        metadata: None,
    })
}

pub fn build_text_cnn(config: TextCnnConfig, vocab: Vocabulary, seed: u64) -> Result<TrainedModel> {
    config.validate()?;
    if config.vocabulary_size != vocab.len() {
        return Err(Error::InvalidConfig(format!(
            "configured vocabulary size {} does not match vocabulary size {}",
            config.vocabulary_size,
            vocab.len()
        )));
    }
    let arch = Architecture::TextCnn(config);
    let params = init_params(&arch, seed);
    Ok(TrainedModel {
        arch,
        params,
        vocab,
        metadata: None,
    })
}

fn init_params(arch: &Architecture, seed: u64) -> Vec<Arc<Tensor>> {
    let shapes = arch.param_shapes();
    let inits: Vec<Init> = match arch {
        Architecture::BowMlp(_) => shapes
            .iter()
            .map(|s| {
                if s.len() == 2 {
                    Init::Glorot {
                        fan_in: s[0],
                        fan_out: s[1],
                    }
                } else {
                    Init::Zero
                }
            })
            .collect(),
        Architecture::TextCnn(c) => vec![
            Init::Embedding,
            Init::Glorot {
                fan_in: c.filter_width * c.embedding_dim,
                fan_out: c.filter_count,
            },
            Init::Zero,
            Init::Glorot {
                fan_in: c.filter_count,
                fan_out: 1,
            },
            Init::Zero,
        ],
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes
        .into_iter()
        .zip(inits)
        .map(|(shape, init)| {
            let numel = shape.iter().product();
            let data = match init {
                Init::Glorot { fan_in, fan_out } => {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
                }
                Init::Embedding => (0..numel).map(|_| rng.gen_range(-0.05..0.05)).collect(),
                Init::Zero => vec![0.0; numel],
            };
            Arc::new(Tensor::new(shape, data).expect("shape arithmetic"))
        })
        .collect()
}

impl TrainedModel {
    pub fn bow_config(&self) -> Result<&BowMlpConfig> {
        match &self.arch {
            Architecture::BowMlp(c) => Ok(c),
            Architecture::TextCnn(_) => Err(Error::EncodingMismatch(
                "bag-of-words input given to a text-cnn model".into(),
            )),
        }
    }

    pub fn cnn_config(&self) -> Result<&TextCnnConfig> {
        match &self.arch {
            Architecture::TextCnn(c) => Ok(c),
            Architecture::BowMlp(_) => Err(Error::EncodingMismatch(
                "token sequence given to a bow-mlp model".into(),
            )),
        }
    }

    fn push_params(&self, tape: &mut Tape, requires_grad: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| tape.shared_leaf(Arc::clone(p), requires_grad))
            .collect()
    }

    /// Forward pass over an arbitrary dense feature vector. The binary
    /// bag-of-words encoding is relaxed to real values here, which is what
    /// both input-gradient and finite-difference evaluation rely on.
    pub fn bow_forward_dense(
        &self,
        tape: &mut Tape,
        features: Vec<f64>,
        input_grad: bool,
        param_grad: bool,
    ) -> Result<BowForward> {
        let config = self.bow_config()?;
        if features.len() != config.input_size {
            return Err(Error::EncodingMismatch(format!(
                "feature vector of length {} for input size {}",
                features.len(),
                config.input_size
            )));
        }
        let params = self.push_params(tape, param_grad);
        let input = tape.leaf(Tensor::vector(features), input_grad);
        let preact1 = tape.affine(input, params[0], params[1])?;
        let h1 = tape.relu(preact1);
        let preact2 = tape.affine(h1, params[2], params[3])?;
        let h2 = tape.relu(preact2);
        let score = tape.affine(h2, params[4], params[5])?;
        Ok(BowForward {
            params,
            input,
            preact1,
            preact2,
            score,
        })
    }

    pub fn bow_forward(
        &self,
        tape: &mut Tape,
        example: &BowVector,
        input_grad: bool,
        param_grad: bool,
    ) -> Result<BowForward> {
        self.bow_forward_dense(tape, example.to_dense(), input_grad, param_grad)
    }

    /// Forward pass over a padded index sequence. With `embedding_grad` the
    /// gathered embedding output is marked as a gradient leaf so backward
    /// reports d score / d z.
    pub fn cnn_forward(
        &self,
        tape: &mut Tape,
        sequence: &TokenSequence,
        embedding_grad: bool,
        param_grad: bool,
    ) -> Result<CnnForward> {
        let config = self.cnn_config()?;
        if sequence.len() != config.sequence_length {
            return Err(Error::EncodingMismatch(format!(
                "sequence of length {} for configured length {}",
                sequence.len(),
                config.sequence_length
            )));
        }
        let params = self.push_params(tape, param_grad);
        let indices: Vec<usize> = sequence.indices().iter().map(|&i| i as usize).collect();
        let embedded = tape.gather(params[0], &indices)?;
        if embedding_grad {
            tape.retain_grad(embedded);
        }
        self.cnn_head(tape, params, embedded)
    }

    /// Head of the convolution network applied to an explicit embedding
    /// tensor, used by black-box finite differences over z.
    pub fn cnn_forward_from_embedding(
        &self,
        tape: &mut Tape,
        embedded: Tensor,
        embedding_grad: bool,
    ) -> Result<CnnForward> {
        let config = self.cnn_config()?;
        if embedded.shape() != [config.sequence_length, config.embedding_dim] {
            return Err(Error::EncodingMismatch(format!(
                "embedding tensor of shape {:?}, expected [{}, {}]",
                embedded.shape(),
                config.sequence_length,
                config.embedding_dim
            )));
        }
        let params = self.push_params(tape, false);
        let z = tape.leaf(embedded, embedding_grad);
        self.cnn_head(tape, params, z)
    }

    fn cnn_head(
        &self,
        tape: &mut Tape,
        params: Vec<NodeId>,
        embedded: NodeId,
    ) -> Result<CnnForward> {
        let conv = tape.conv1d_valid(embedded, params[1], params[2])?;
        let pooled = tape.max_pool_time(conv)?;
        let score = tape.affine(pooled, params[3], params[4])?;
        Ok(CnnForward {
            params,
            embedded,
            conv,
            pooled,
            score,
        })
    }

    pub fn predict_bow(&self, example: &BowVector) -> Result<Prediction> {
        let mut tape = Tape::new();
        let fwd = self.bow_forward(&mut tape, example, false, false)?;
        let prob = tape.sigmoid(fwd.score);
        Ok(Prediction {
            probability: tape.scalar_value(prob),
            score: tape.scalar_value(fwd.score),
        })
    }

    pub fn predict_sequence(&self, sequence: &TokenSequence) -> Result<Prediction> {
        let mut tape = Tape::new();
        let fwd = self.cnn_forward(&mut tape, sequence, false, false)?;
        let prob = tape.sigmoid(fwd.score);
        Ok(Prediction {
            probability: tape.scalar_value(prob),
            score: tape.scalar_value(fwd.score),
        })
    }

    pub fn params_finite(&self) -> bool {
        self.params.iter().all(|p| p.all_finite())
    }
}

/// Dataset encoded to match one of the two architectures.
#[derive(Debug, Clone)]
pub enum EncodedDataset {
    Bow(Vec<(BowVector, u8)>),
    Sequence(Vec<(TokenSequence, u8)>),
}

impl EncodedDataset {
    pub fn from_bow(corpus: &[LabeledExample], vocab: &Vocabulary) -> Self {
        EncodedDataset::Bow(
            corpus
                .iter()
                .map(|e| {
                    (
                        crate::text::encode_bow(&crate::text::tokenize(&e.text), vocab),
                        e.label,
                    )
                })
                .collect(),
        )
    }

    pub fn from_sequences(corpus: &[LabeledExample], vocab: &Vocabulary, len: usize) -> Self {
        EncodedDataset::Sequence(
            corpus
                .iter()
                .map(|e| {
                    (
                        crate::text::encode_sequence(&crate::text::tokenize(&e.text), vocab, len),
                        e.label,
                    )
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        match self {
            EncodedDataset::Bow(v) => v.len(),
            EncodedDataset::Sequence(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fraction of examples whose thresholded prediction (probability > 0.5)
/// matches the label. Examples are scored in parallel against the shared
/// immutable model.
pub fn evaluate(model: &TrainedModel, data: &EncodedDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let correct = match data {
        EncodedDataset::Bow(examples) => {
            model.bow_config()?;
            examples
                .par_iter()
                .map(|(x, label)| {
                    model
                        .predict_bow(x)
                        .map(|p| usize::from(p.thresholded() == *label))
                })
                .try_reduce(|| 0, |a, b| Ok(a + b))?
        }
        EncodedDataset::Sequence(examples) => {
            model.cnn_config()?;
            examples
                .par_iter()
                .map(|(seq, label)| {
                    model
                        .predict_sequence(seq)
                        .map(|p| usize::from(p.thresholded() == *label))
                })
                .try_reduce(|| 0, |a, b| Ok(a + b))?
        }
    };
    Ok(correct as f64 / data.len() as f64)
}
