//! Per-token saliency for the convolution model: every non-pad token is
//! ranked by the l2 norm of its embedding-gradient row, and the top anchors
//! are expanded into the expression windows their convolution sees.

use crate::error::{Error, Result};
use crate::models::TrainedModel;
use crate::tensor::Tensor;
use crate::text::{TokenSequence, Vocabulary};

use super::{scored_output, ScoreKind};

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSaliency {
    /// Position in the padded sequence.
    pub position: usize,
    pub token: String,
    /// l2 norm of the gradient row for this token's embedding vector.
    pub norm: f64,
    /// 1-based; ranks form a permutation of the non-pad positions.
    pub rank: usize,
}

/// Rank the non-pad tokens of a sequence by gradient norm, descending.
/// Equal norms keep the earlier position first.
pub fn token_saliency(
    model: &TrainedModel,
    sequence: &TokenSequence,
    kind: ScoreKind,
) -> Result<Vec<TokenSaliency>> {
    model.cnn_config()?;
    if sequence.effective_len() == 0 {
        return Err(Error::AllPadSequence);
    }
    let mut tape = crate::tape::Tape::new();
    let fwd = model.cnn_forward(&mut tape, sequence, true, false)?;
    let output = scored_output(&mut tape, fwd.score, kind);
    let mut grads = tape.backward(output)?;
    let grad = grads
        .take(fwd.embedded)
        .expect("embedding output marked for gradients");
    Ok(rank_token_rows(&grad, sequence, &model.vocab))
}

/// Ranking step, separated from the gradient computation so the tie and
/// exclusion rules can be pinned down directly.
pub(crate) fn rank_token_rows(
    grad: &Tensor,
    sequence: &TokenSequence,
    vocab: &Vocabulary,
) -> Vec<TokenSaliency> {
    let dim = grad.shape()[1];
    let mut scored: Vec<(usize, f64)> = (sequence.pad_count()..sequence.len())
        .map(|t| {
            let row = &grad.data()[t * dim..(t + 1) * dim];
            (t, row.iter().map(|v| v * v).sum::<f64>().sqrt())
        })
        .collect();
    scored.sort_by(|(pa, na), (pb, nb)| nb.partial_cmp(na).expect("finite norms").then(pa.cmp(pb)));
    scored
        .into_iter()
        .enumerate()
        .map(|(i, (position, norm))| TokenSaliency {
            position,
            token: vocab
                .word(sequence.indices()[position] as usize)
                .expect("encoded index in vocabulary")
                .to_owned(),
            norm,
            rank: i + 1,
        })
        .collect()
}

/// A saliency anchor together with the tokens its convolution window covers.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionWindow {
    pub anchor: usize,
    /// At most `filter_width` tokens starting at the anchor, truncated at the
    /// end of the sequence.
    pub window: Vec<String>,
    pub norm: f64,
}

/// Expand the `top_m` best-ranked anchors into expression windows. `tokens`
/// is indexed by sequence position (pads included at the front, which no
/// window can reach since windows extend rightward from non-pad anchors).
pub fn extract_expressions(
    saliency: &[TokenSaliency],
    tokens: &[String],
    filter_width: usize,
    top_m: usize,
) -> Vec<ExpressionWindow> {
    let mut ranked: Vec<&TokenSaliency> = saliency.iter().collect();
    ranked.sort_by_key(|s| s.rank);
    ranked
        .into_iter()
        .take(top_m)
        .map(|s| {
            let end = (s.position + filter_width).min(tokens.len());
            ExpressionWindow {
                anchor: s.position,
                window: tokens[s.position..end].to_vec(),
                norm: s.norm,
            }
        })
        .collect()
}
