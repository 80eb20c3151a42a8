//! Robust sequence-to-sequence learning with self-supervised input
//! representations: smooth perturbation of source sentences, a compact
//! encoder-decoder transformer with token and position reconstruction heads,
//! training, decoding and robustness/probing evaluation.

pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
