//! Model interpretation through input gradients.
//!
//! Locally, the gradient of the score at one example says which features
//! drive that prediction; globally, averaging the per-example gradients over
//! a test set gives a single importance vector over the vocabulary, which
//! also acts as a linear stand-in for the full model via `sign(<g, x>)`.
//!
//! Gradients are taken of the pre-sigmoid score by default. The sigmoid is
//! strictly monotone, so per-example rankings and surrogate signs do not
//! depend on the choice, but the averaged vector can; every report records
//! which kind produced it.

mod finite_diff;
mod saliency;

pub use finite_diff::{
    fd_check_bow, fd_check_sequences, finite_difference_gradient, relative_error, FdCheckReport,
    FdMode,
};
pub use saliency::{extract_expressions, token_saliency, ExpressionWindow, TokenSaliency};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::TrainedModel;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::text::{BowVector, TokenSequence, Vocabulary, PAD_INDEX, UNK_INDEX};

/// Which scalar output the gradient is taken of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreKind {
    /// Pre-sigmoid score.
    #[default]
    Logit,
    /// Sigmoid probability.
    Probability,
}

impl ScoreKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Logit => "logit",
            ScoreKind::Probability => "probability",
        }
    }
}

pub(crate) fn scored_output(tape: &mut Tape, score: NodeId, kind: ScoreKind) -> NodeId {
    match kind {
        ScoreKind::Logit => score,
        ScoreKind::Probability => tape.sigmoid(score),
    }
}

/// Per-feature gradient of one example.
#[derive(Debug, Clone)]
pub enum FeatureGradient {
    /// One value per bag-of-words feature.
    Bow(Vec<f64>),
    /// One row per token position (the gradient with respect to the gathered
    /// embedding output).
    PerToken(Tensor),
}

#[derive(Debug, Clone)]
pub struct LocalGradient {
    pub values: FeatureGradient,
    pub score_kind: ScoreKind,
}

/// Gradient of the selected score with respect to the (relaxed, real-valued)
/// bag-of-words input.
pub fn local_gradient_bow(
    model: &TrainedModel,
    example: &BowVector,
    kind: ScoreKind,
) -> Result<LocalGradient> {
    let mut tape = Tape::new();
    let fwd = model.bow_forward(&mut tape, example, true, false)?;
    let output = scored_output(&mut tape, fwd.score, kind);
    let mut grads = tape.backward(output)?;
    let grad = grads.take(fwd.input).expect("input marked for gradients");
    debug_assert!(grad.all_finite());
    Ok(LocalGradient {
        values: FeatureGradient::Bow(grad.into_data()),
        score_kind: kind,
    })
}

/// Gradient of the selected score with respect to the embedding output z,
/// one row per token position.
pub fn local_gradient_sequence(
    model: &TrainedModel,
    sequence: &TokenSequence,
    kind: ScoreKind,
) -> Result<LocalGradient> {
    let mut tape = Tape::new();
    let fwd = model.cnn_forward(&mut tape, sequence, true, false)?;
    let output = scored_output(&mut tape, fwd.score, kind);
    let mut grads = tape.backward(output)?;
    let grad = grads
        .take(fwd.embedded)
        .expect("embedding output marked for gradients");
    debug_assert!(grad.all_finite());
    Ok(LocalGradient {
        values: FeatureGradient::PerToken(grad),
        score_kind: kind,
    })
}

/// Coordinate-wise mean of the per-example input gradients over a test set.
#[derive(Debug, Clone)]
pub struct GlobalGradient {
    pub values: Vec<f64>,
    pub sample_count: usize,
    pub score_kind: ScoreKind,
}

/// Average the signed per-example gradients over `examples`.
///
/// Per-example work fans out across threads, but the sum is a pairwise tree
/// over example indices, so the result is bit-stable no matter how the work
/// is scheduled.
pub fn mean_gradient(
    model: &TrainedModel,
    examples: &[BowVector],
    kind: ScoreKind,
) -> Result<GlobalGradient> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per_example = |i: usize| -> Result<Vec<f64>> {
        match local_gradient_bow(model, &examples[i], kind)?.values {
            FeatureGradient::Bow(g) => Ok(g),
            FeatureGradient::PerToken(_) => unreachable!("bow gradient requested"),
        }
    };
    let mut sum = pairwise_sum(&per_example, 0, examples.len())?;
    let scale = 1.0 / examples.len() as f64;
    for v in &mut sum {
        *v *= scale;
    }
    Ok(GlobalGradient {
        values: sum,
        sample_count: examples.len(),
        score_kind: kind,
    })
}

/// Pairwise summation of `f(lo) + ... + f(hi - 1)` with a fixed reduction
/// tree; the two halves may run in parallel.
fn pairwise_sum<F>(f: &F, lo: usize, hi: usize) -> Result<Vec<f64>>
where
    F: Fn(usize) -> Result<Vec<f64>> + Sync,
{
    debug_assert!(lo < hi);
    if hi - lo == 1 {
        return f(lo);
    }
    let mid = lo + (hi - lo) / 2;
    let (left, right) = rayon::join(|| pairwise_sum(f, lo, mid), || pairwise_sum(f, mid, hi));
    let (mut left, right) = (left?, right?);
    if left.len() != right.len() {
        return Err(Error::DimensionMismatch(format!(
            "gradient lengths {} and {}",
            left.len(),
            right.len()
        )));
    }
    for (a, b) in left.iter_mut().zip(&right) {
        *a += b;
    }
    Ok(left)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordWeight {
    pub word: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordRanking {
    /// Words with the largest mean-gradient values, descending.
    pub positive: Vec<WordWeight>,
    /// Words with the smallest values, ascending.
    pub negative: Vec<WordWeight>,
}

/// The most influential words for each sentiment. Pad and unknown slots are
/// not words and never appear; lists are truncated when `top_n` exceeds the
/// number of vocabulary words. Ties keep the lower index first.
pub fn rank_global_words(
    global: &GlobalGradient,
    vocab: &Vocabulary,
    top_n: usize,
) -> Result<WordRanking> {
    if global.values.len() != vocab.len() {
        return Err(Error::DimensionMismatch(format!(
            "global gradient of length {} over vocabulary of size {}",
            global.values.len(),
            vocab.len()
        )));
    }
    let mut order: Vec<usize> = (0..vocab.len())
        .filter(|&i| i != PAD_INDEX && i != UNK_INDEX)
        .collect();
    let weight = |i: usize| WordWeight {
        word: vocab.word(i).expect("index in range").to_owned(),
        value: global.values[i],
    };

    order.sort_by(|&a, &b| {
        global.values[b]
            .partial_cmp(&global.values[a])
            .expect("finite gradients")
            .then(a.cmp(&b))
    });
    let positive = order.iter().take(top_n).map(|&i| weight(i)).collect();

    order.sort_by(|&a, &b| {
        global.values[a]
            .partial_cmp(&global.values[b])
            .expect("finite gradients")
            .then(a.cmp(&b))
    });
    let negative = order.iter().take(top_n).map(|&i| weight(i)).collect();

    Ok(WordRanking { positive, negative })
}

/// The linear stand-in: classify as 1 exactly when `<g, x>` is positive.
/// Returns the label and the inner product it came from.
pub fn surrogate_predict(global: &GlobalGradient, example: &BowVector) -> Result<(u8, f64)> {
    if global.values.len() != example.size() {
        return Err(Error::DimensionMismatch(format!(
            "global gradient of length {} against input of size {}",
            global.values.len(),
            example.size()
        )));
    }
    let inner: f64 = example
        .ones()
        .iter()
        .map(|&i| global.values[i as usize])
        .sum();
    Ok((u8::from(inner > 0.0), inner))
}

/// Fraction of examples where the surrogate matches the model's own
/// thresholded prediction (not the true labels).
pub fn surrogate_agreement(
    global: &GlobalGradient,
    model: &TrainedModel,
    examples: &[BowVector],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let agreements = examples
        .par_iter()
        .map(|x| {
            let (label, _) = surrogate_predict(global, x)?;
            let prediction = model.predict_bow(x)?;
            Ok(usize::from(label == prediction.thresholded()))
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(agreements as f64 / examples.len() as f64)
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::models::{build_bow_mlp, BowMlpConfig};
    use std::sync::Arc;

    /// A bag-of-words MLP that computes exactly `beta . x` for binary inputs:
    /// one ReLU path is kept always-active by a bias large enough to cover
    /// any input, and the final bias cancels the offset.
    pub fn exact_linear_bow_model(beta: &[f64], vocab: Vocabulary) -> TrainedModel {
        let p = beta.len();
        assert_eq!(p, vocab.len());
        let mut config = BowMlpConfig::new(p);
        config.hidden_sizes = vec![4, 3];
        let mut model = build_bow_mlp(config, vocab, 0).unwrap();

        let margin = 10.0 + beta.iter().map(|b| b.abs()).sum::<f64>();
        let shapes: Vec<Vec<f64>> = vec![
            // w1: column 0 carries beta
            {
                let mut w = vec![0.0; p * 4];
                for (i, &b) in beta.iter().enumerate() {
                    w[i * 4] = b;
                }
                w
            },
            vec![margin, margin, margin, margin],
            // w2: route hidden 0 through
            {
                let mut w = vec![0.0; 4 * 3];
                w[0] = 1.0;
                w
            },
            vec![margin, margin, margin],
            vec![1.0, 0.0, 0.0],
            // cancel the accumulated offset: (x.beta + m) + m flows to output
            vec![-2.0 * margin],
        ];
        for (param, data) in model.params.iter_mut().zip(shapes) {
            let t = Arc::make_mut(param);
            t.data_mut().copy_from_slice(&data);
        }
        model
    }
}
