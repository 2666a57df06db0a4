//! Query-free out-of-distribution detection for dense-retrieval corpora.
//!
//! Each document is used as its own query: its nearest neighbours become
//! pseudo-positives, hard negatives are mined around them, and the norm of
//! the contrastive-loss gradient scores how poorly the retriever fits the
//! document. Scores above a threshold calibrated on in-domain documents flag
//! the document; the flagged fraction decides whether the corpus is OOD.

pub mod detector;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod gradnorm;
pub mod io;
pub mod knn;
pub mod sampler;
pub mod seed;
pub mod vector;

pub use error::{Error, Result};
