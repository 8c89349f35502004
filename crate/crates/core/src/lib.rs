//! Cross-modal neighbor representations (CODER) for training-free image
//! classification on top of precomputed vision-language embeddings.
//!
//! * [`embedding_store`]: the bundle file format shared with encoder exporters.
//! * [`atg`]: automatic generation of the class text families through an LLM.
//! * [`coder`]: CODER construction and the stage-1 heuristic classifier.
//! * [`zeroshot`]: two-stage zero-shot classification with one-to-one rerank.
//! * [`fewshot`]: the training-free few-shot adapter.
//! * [`eval`]: run manifests, accuracy reports and ablation sweeps.

pub mod atg;
pub mod coder;
pub mod embedding_store;
pub mod eval;
pub mod fewshot;
pub mod zeroshot;

pub use coder::{ClassPartition, ClassScores, CoderMatrix, PsiMapping};
pub use embedding_store::{
    read_bundle, write_bundle, EmbeddingBundle, Family, FeatureMatrix, ImageRecord, TextRecord,
};
