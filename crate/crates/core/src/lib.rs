//! Writer retrieval from local handwriting descriptors: codebook training,
//! VLAD and triangulation embeddings, sum and generalized max pooling,
//! normalization chains, exemplar SVMs and leave-one-out evaluation.

pub mod aggregation;
pub mod codebook;
pub mod descriptors;
pub mod embedding;
pub mod error;
pub mod esvm;
pub mod evaluation;
pub mod normalization;
pub mod numerics;
pub mod pipeline;

pub use error::{Error, Result};
