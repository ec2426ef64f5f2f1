//! FreeChunker: cross-granularity chunking for retrieval.
//!
//! Documents are split into atomic sentences, each sentence is embedded
//! once, and a masked-attention encoder turns the sentence embeddings into
//! chunk embeddings for every requested granularity in a single forward
//! pass. The crate also ships the substitution-loss analysis, a distillation
//! training loop, brute-force cosine retrieval, and reference chunkers for
//! comparison.
//!
//! The numeric core is generic over the scalar type ([`scalar::Scalar`]):
//! the pipeline runs in `f32`, verification paths in `f64`.

pub mod baselines;
pub mod config;
pub mod embedders;
pub mod encoder;
pub mod numerics;
pub mod patterns;
pub mod pipeline;
pub mod retrieval;
pub mod scalar;
pub mod sentencizer;
pub mod theory;
pub mod training;
pub mod weights_io;

/// Working precision of the pipeline.
pub type F = f32;
/// Matrix in working precision.
pub type Mat = numerics::Matrix<F>;
/// Matrix in verification precision.
pub type Mat64 = numerics::Matrix<f64>;
/// Encoder weights in working precision.
pub type Weights = encoder::EncoderWeights<F>;
