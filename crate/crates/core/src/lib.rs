//! Transformer next-item retrieval: item tokens built from id and side
//! attributes, older history compressed into pooled window tokens, a causal
//! backbone read out through learned query tokens, trained with a
//! logQ-corrected, label-smoothed in-batch softmax and served by exact top-K
//! inner-product retrieval.

pub mod ablate;
pub mod autograd;
pub mod checkpoint;
pub mod compression;
pub mod config;
pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod retrieval;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
