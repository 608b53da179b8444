//! Answer selection for non-factoid question answering: a BM25 retriever over
//! an inverted index, neural re-rankers (siamese biLSTM and a transformer
//! cross-encoder) trained with pointwise, pairwise, hinge and masked-LM
//! objectives, staged transfer-then-adapt fine-tuning, and MRR/NDCG/precision
//! evaluation.

pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod index;
pub mod neural;
pub mod rankers;
pub mod synthetic;
pub mod textenc;
pub mod training;

pub use error::{Error, Result};
