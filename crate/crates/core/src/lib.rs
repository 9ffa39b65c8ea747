//! Lexically aligned cross-lingual masked-LM pretraining for unsupervised
//! machine translation, at desk scale.
//!
//! The pipeline runs in three stages:
//!
//! 1. [`corpus`] + [`sgns`] + [`vecmap`]: BPE-split monolingual corpora,
//!    train subword skip-gram embeddings per language, and map both spaces
//!    into one with an identical-token seed and CSLS self-learning.
//! 2. [`mlm`]: initialize the token embedding layer of a transformer encoder
//!    from the mapped embeddings and train it as a bilingual masked LM.
//! 3. [`unmt`]: transfer the encoder into an encoder-decoder and train it
//!    with denoising auto-encoding and online back-translation.
//!
//! [`eval`] provides BLI precision, BLEU and chrF; [`pipeline`] wires the
//! stages into experiments over synthetic [`cipher`] language pairs or
//! user-supplied corpora.
//!
//! All numeric code is generic over [`Scalar`]; the aliases below fix the
//! element type for the common cases.

pub mod cipher;
pub mod config;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod mlm;
pub mod neural;
pub mod pipeline;
pub mod scalar;
pub mod sgns;
pub mod unmt;
pub mod vecmap;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type EmbeddingMatrix32 = embedding::EmbeddingMatrix<f32>;
pub type EmbeddingMatrix64 = embedding::EmbeddingMatrix<f64>;
pub type Tensor32 = neural::Tensor<f32>;
pub type Tensor64 = neural::Tensor<f64>;
pub type ParamStore32 = neural::ParamStore<f32>;
pub type ParamStore64 = neural::ParamStore<f64>;
pub type MlmModel32 = mlm::MlmModel<f32>;
pub type MlmModel64 = mlm::MlmModel<f64>;
pub type Seq2Seq32 = unmt::Seq2Seq<f32>;
pub type Seq2Seq64 = unmt::Seq2Seq<f64>;
