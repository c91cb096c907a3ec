//! Interprets binary text classifiers by looking at their input gradients.
//!
//! The crate bundles four layers:
//!
//! - [`tape`]: a small reverse-mode autodiff engine over dense `f64` tensors,
//!   with gradients available for inputs as well as parameters.
//! - [`text`]: corpus loading (the standard movie-review directory layout),
//!   tokenization, vocabulary construction, bag-of-words and padded index
//!   encodings, and a synthetic labeled corpus with known ground truth.
//! - [`models`]: the two classifiers under study (a bag-of-words MLP and a
//!   word-embedding convolution network), Adam training, evaluation, and a
//!   versioned binary model format.
//! - [`attribution`]: per-token saliency with expression windows, global mean
//!   gradients with word rankings, the `sign(<g, x>)` linear surrogate, and a
//!   finite-difference cross-check for black-box scorers.
//!
//! [`report`] serializes attribution results to JSON and TSV for the CLI.

pub mod attribution;
pub mod error;
pub mod models;
pub mod report;
pub mod tape;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
pub use tensor::Tensor;
