//! Numerical gradients for black-box scorers, and cross-checks of the
//! reverse-mode gradients against them.
//!
//! The check functions skip coordinates whose perturbation interval crosses a
//! ReLU kink or flips a max-pool winner: the forward passes expose their
//! activation pattern, and a coordinate only counts when the pattern is
//! identical at the base and perturbed points, where the score is smooth and
//! central differences are trustworthy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::TrainedModel;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::text::{BowVector, TokenSequence};

use super::{scored_output, FeatureGradient, ScoreKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FdMode {
    /// One-sided differences, (f(x + h e_k) - f(x)) / h.
    /// The baseline f(x) is evaluated once and shared across coordinates,
    /// so a full gradient costs p + 1 forward passes.
    Forward,
    /// Symmetric differences, (f(x + h e_k) - f(x - h e_k)) / (2 h).
    #[default]
    Central,
}

impl FdMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FdMode::Forward => "forward",
            FdMode::Central => "central",
        }
    }
}

/// Estimate the gradient of an arbitrary scalar function by perturbing one
/// coordinate at a time. Needs nothing from the scorer but forward passes.
pub fn finite_difference_gradient<F>(scorer: F, x: &[f64], h: f64, mode: FdMode) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "step size {h} must be positive"
        )));
    }
    let mut probe = x.to_vec();
    let baseline = match mode {
        FdMode::Forward => {
            let b = scorer(&probe);
            if !b.is_finite() {
                return Err(Error::NonFiniteScore(0));
            }
            Some(b)
        }
        FdMode::Central => None,
    };
    let mut grad = vec![0.0; x.len()];
    for k in 0..x.len() {
        probe[k] = x[k] + h;
        let plus = scorer(&probe);
        let estimate = match mode {
            FdMode::Forward => (plus - baseline.expect("set above")) / h,
            FdMode::Central => {
                probe[k] = x[k] - h;
                let minus = scorer(&probe);
                (plus - minus) / (2.0 * h)
            }
        };
        probe[k] = x[k];
        if !estimate.is_finite() {
            return Err(Error::NonFiniteScore(k));
        }
        grad[k] = estimate;
    }
    Ok(grad)
}

/// |a - b| over the larger magnitude, floored at 1e-6 so that coordinates
/// with negligible gradient compare absolutely instead of blowing up.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Outcome of comparing reverse-mode gradients with finite differences over
/// sampled test inputs.
#[derive(Debug, Clone)]
pub struct FdCheckReport {
    pub mode: FdMode,
    pub h: f64,
    pub examples_checked: usize,
    pub coordinates_checked: usize,
    /// Coordinates whose perturbation crossed a ReLU kink or max-pool tie.
    pub coordinates_skipped: usize,
    pub max_relative_error: f64,
    pub mean_relative_error: f64,
}

/// Activation pattern of one forward pass; comparing patterns at perturbed
/// points detects kink and tie crossings exactly.
#[derive(PartialEq, Eq, Clone)]
enum Signature {
    Relu(Vec<bool>),
    Argmax(Vec<usize>),
}

fn bow_probe(model: &TrainedModel, features: &[f64], kind: ScoreKind) -> Result<(f64, Signature)> {
    let mut tape = Tape::new();
    let fwd = model.bow_forward_dense(&mut tape, features.to_vec(), false, false)?;
    let output = scored_output(&mut tape, fwd.score, kind);
    let mut masks: Vec<bool> = tape
        .value(fwd.preact1)
        .data()
        .iter()
        .map(|&v| v > 0.0)
        .collect();
    masks.extend(tape.value(fwd.preact2).data().iter().map(|&v| v > 0.0));
    Ok((tape.scalar_value(output), Signature::Relu(masks)))
}

fn cnn_probe(model: &TrainedModel, z: &[f64], kind: ScoreKind) -> Result<(f64, Signature)> {
    let config = model.cnn_config()?;
    let mut tape = Tape::new();
    let embedded = Tensor::new(
        vec![config.sequence_length, config.embedding_dim],
        z.to_vec(),
    )?;
    let fwd = model.cnn_forward_from_embedding(&mut tape, embedded, false)?;
    let output = scored_output(&mut tape, fwd.score, kind);
    let argmax = tape
        .max_pool_argmax(fwd.pooled)
        .expect("pooled node")
        .to_vec();
    Ok((tape.scalar_value(output), Signature::Argmax(argmax)))
}

struct ExampleStats {
    checked: usize,
    skipped: usize,
    max_err: f64,
    err_sum: f64,
}

/// Compare the autodiff gradient of one example against finite differences
/// on a sampled subset of coordinates.
fn check_example<P>(
    probe: P,
    autodiff: &[f64],
    point: &[f64],
    h: f64,
    mode: FdMode,
    coords: &[usize],
) -> Result<ExampleStats>
where
    P: Fn(&[f64]) -> Result<(f64, Signature)>,
{
    let (base_score, base_sig) = probe(point)?;
    if !base_score.is_finite() {
        return Err(Error::NonFiniteScore(0));
    }
    let mut stats = ExampleStats {
        checked: 0,
        skipped: 0,
        max_err: 0.0,
        err_sum: 0.0,
    };
    let mut probe_point = point.to_vec();
    for &k in coords {
        probe_point[k] = point[k] + h;
        let (plus, sig_plus) = probe(&probe_point)?;
        let estimate = if mode == FdMode::Forward {
            probe_point[k] = point[k];
            if sig_plus != base_sig {
                stats.skipped += 1;
                continue;
            }
            (plus - base_score) / h
        } else {
            probe_point[k] = point[k] - h;
            let (minus, sig_minus) = probe(&probe_point)?;
            probe_point[k] = point[k];
            if sig_plus != base_sig || sig_minus != base_sig {
                stats.skipped += 1;
                continue;
            }
            (plus - minus) / (2.0 * h)
        };
        let err = relative_error(autodiff[k], estimate);
        stats.checked += 1;
        stats.err_sum += err;
        stats.max_err = stats.max_err.max(err);
    }
    Ok(stats)
}

fn sample_coords(total: usize, per_example: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match per_example {
        Some(k) if k < total => {
            let mut all: Vec<usize> = (0..total).collect();
            all.shuffle(rng);
            all.truncate(k);
            all.sort_unstable();
            all
        }
        _ => (0..total).collect(),
    }
}

fn combine(per_example: Vec<ExampleStats>, mode: FdMode, h: f64) -> FdCheckReport {
    let mut report = FdCheckReport {
        mode,
        h,
        examples_checked: per_example.len(),
        coordinates_checked: 0,
        coordinates_skipped: 0,
        max_relative_error: 0.0,
        mean_relative_error: 0.0,
    };
    let mut err_sum = 0.0;
    for stats in per_example {
        report.coordinates_checked += stats.checked;
        report.coordinates_skipped += stats.skipped;
        report.max_relative_error = report.max_relative_error.max(stats.max_err);
        err_sum += stats.err_sum;
    }
    if report.coordinates_checked > 0 {
        report.mean_relative_error = err_sum / report.coordinates_checked as f64;
    }
    report
}

/// Cross-check input gradients of a bag-of-words model on test examples.
/// With `coords_per_example` set, only that many randomly chosen coordinates
/// are perturbed per example.
pub fn fd_check_bow(
    model: &TrainedModel,
    examples: &[BowVector],
    kind: ScoreKind,
    mode: FdMode,
    h: f64,
    coords_per_example: Option<usize>,
    seed: u64,
) -> Result<FdCheckReport> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    model.bow_config()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coord_sets: Vec<Vec<usize>> = examples
        .iter()
        .map(|x| sample_coords(x.size(), coords_per_example, &mut rng))
        .collect();
    let stats = examples
        .par_iter()
        .zip(coord_sets.par_iter())
        .map(|(x, coords)| {
            let autodiff = match super::local_gradient_bow(model, x, kind)?.values {
                FeatureGradient::Bow(g) => g,
                FeatureGradient::PerToken(_) => unreachable!(),
            };
            let dense = x.to_dense();
            check_example(
                |p| bow_probe(model, p, kind),
                &autodiff,
                &dense,
                h,
                mode,
                coords,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(combine(stats, mode, h))
}

/// Cross-check embedding gradients of a convolution model on test examples.
pub fn fd_check_sequences(
    model: &TrainedModel,
    examples: &[TokenSequence],
    kind: ScoreKind,
    mode: FdMode,
    h: f64,
    coords_per_example: Option<usize>,
    seed: u64,
) -> Result<FdCheckReport> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let config = model.cnn_config()?;
    let z_len = config.sequence_length * config.embedding_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coord_sets: Vec<Vec<usize>> = examples
        .iter()
        .map(|_| sample_coords(z_len, coords_per_example, &mut rng))
        .collect();
    let stats = examples
        .par_iter()
        .zip(coord_sets.par_iter())
        .map(|(seq, coords)| {
            let autodiff = match super::local_gradient_sequence(model, seq, kind)?.values {
                FeatureGradient::PerToken(g) => g.into_data(),
                FeatureGradient::Bow(_) => unreachable!(),
            };
            let mut tape = Tape::new();
            let fwd = model.cnn_forward(&mut tape, seq, false, false)?;
            let z = tape.value(fwd.embedded).data().to_vec();
            check_example(
                |p| cnn_probe(model, p, kind),
                &autodiff,
                &z,
                h,
                mode,
                coords,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(combine(stats, mode, h))
}
