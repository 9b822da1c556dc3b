//! Discrete flow models: conditional flows over categorical sequences, the
//! rate matrices that generate them, denoisers, CTMC sampling, joint
//! continuous/discrete generation and evaluation utilities.

pub mod data;
pub mod denoise;
pub mod error;
pub mod eval;
pub mod multimodal;
pub mod rates;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tokens;

pub use error::{DfmError, Result};
pub use tokens::{Alphabet, Token, TokenSequence};
