//! Offensive-tweet detection from scratch.
//!
//! The crate trains a BiGRU+CNN binary classifier over tweet text and pits
//! it against classical bag-of-words baselines (multinomial naive Bayes,
//! logistic regression, linear SVM, k-nearest-neighbors). Everything from
//! the tokenizer to the reverse-mode gradients is implemented here; the only
//! external machinery is serialization, CSV parsing, and the CLI surface.
//!
//! Pipeline: CSV → [`data`] split → [`text`] cleaning/encoding → [`model`]
//! training over the [`tensor`]/[`layers`] autodiff stack → [`eval`] metrics
//! and per-epoch history for plotting.

pub mod rng;
pub mod tensor;

pub use rng::Rng;
pub use tensor::{gradient_check, Scalar, Tape, Tensor, Var};

#[cfg(feature = "cli")]
pub mod cli;
pub mod layers;
pub mod text;
pub mod eval;
pub mod baselines;
pub mod data;
pub mod model;
