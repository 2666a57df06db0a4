//! Document and query embeddings: in-memory types, pooling, validation, and
//! the three ways of obtaining them (binary files, JSONL files, an HTTP
//! embedding service).

mod format;
mod jsonl;
mod service;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{read_embedding_set, write_embedding_set, EmbeddingReader, FORMAT_VERSION, MAGIC};
pub use jsonl::{
    open_embedding_set, read_corpus_jsonl, read_embedding_jsonl, read_queries_jsonl, CorpusDoc,
    QueryText,
};
pub use service::{EmbedRequest, EmbeddingClient, EmbeddingResponse, ServiceEmbedding};

/// Relative tolerance for `pooled == pool(token_states)` when both are stored.
pub const POOLING_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    Mean,
    Cls,
    PrePooled,
}

impl Pooling {
    pub fn code(self) -> u16 {
        match self {
            Pooling::Mean => 0,
            Pooling::Cls => 1,
            Pooling::PrePooled => 2,
        }
    }

    pub fn from_code(code: u16) -> Option<Self> {
        match code {
            0 => Some(Pooling::Mean),
            1 => Some(Pooling::Cls),
            2 => Some(Pooling::PrePooled),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbeddingSetHeader {
    pub format_version: u16,
    pub retriever_id: String,
    pub dimension: usize,
    pub record_count: u64,
    pub pooling: Pooling,
    pub has_token_states: bool,
}

impl EmbeddingSetHeader {
    pub fn new(retriever_id: impl Into<String>, dimension: usize, pooling: Pooling) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            retriever_id: retriever_id.into(),
            dimension,
            record_count: 0,
            pooling,
            has_token_states: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimension == 0 {
            return Err(Error::InvalidHeader("dimension must be at least 1".into()));
        }
        if self.pooling == Pooling::PrePooled && self.has_token_states {
            return Err(Error::InvalidHeader(
                "pre-pooled sets cannot carry token states".into(),
            ));
        }
        Ok(())
    }
}

/// Row-major `rows × dim` matrix of token-level hidden states.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStates {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl TokenStates {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::EmptyTokenStates);
        }
        if data.len() != rows * dim {
            return Err(Error::InvalidHeader(format!(
                "token state buffer has {} values, expected {rows}x{dim}",
                data.len()
            )));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).ok_or(Error::EmptyTokenStates)?;
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::InvalidHeader("ragged token state rows".into()));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocumentEmbedding {
    pub doc_id: String,
    pub pooled: Vec<f32>,
    pub token_states: Option<TokenStates>,
}

impl DocumentEmbedding {
    pub fn new(doc_id: impl Into<String>, pooled: Vec<f32>) -> Self {
        Self {
            doc_id: doc_id.into(),
            pooled,
            token_states: None,
        }
    }

    pub fn with_token_states(mut self, states: TokenStates) -> Self {
        self.token_states = Some(states);
        self
    }

    pub fn pooled_f64(&self) -> Vec<f64> {
        crate::vector::to_f64(&self.pooled)
    }

    /// Checks one record against the header it is stored under.
    pub fn validate(&self, header: &EmbeddingSetHeader) -> Result<()> {
        let d = header.dimension;
        if self.pooled.len() != d {
            return Err(Error::DimensionMismatch {
                doc_id: self.doc_id.clone(),
                expected: d,
                found: self.pooled.len(),
            });
        }
        if self.pooled.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(self.doc_id.clone()));
        }
        if self.pooled.iter().all(|&x| x == 0.0) {
            return Err(Error::ZeroNorm(self.doc_id.clone()));
        }
        match (&self.token_states, header.has_token_states) {
            (Some(ts), true) => {
                if ts.dim() != d {
                    return Err(Error::DimensionMismatch {
                        doc_id: self.doc_id.clone(),
                        expected: d,
                        found: ts.dim(),
                    });
                }
                if ts.as_slice().iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(self.doc_id.clone()));
                }
                if header.pooling == Pooling::Mean {
                    let pooled = self.pooled_f64();
                    let expect = pool(ts, Pooling::Mean)?;
                    let diff: f64 = pooled
                        .iter()
                        .zip(&expect)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    if diff > POOLING_TOLERANCE * crate::vector::norm(&expect) {
                        return Err(Error::PoolingMismatch(self.doc_id.clone()));
                    }
                }
                Ok(())
            }
            (None, false) => Ok(()),
            (Some(_), false) => Err(Error::InvalidHeader(format!(
                "{:?} carries token states but the header says it has none",
                self.doc_id
            ))),
            (None, true) => Err(Error::MissingTokenStates(self.doc_id.clone())),
        }
    }
}

/// A fully loaded embedding set whose records agree with its header.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub header: EmbeddingSetHeader,
    pub records: Vec<DocumentEmbedding>,
}

impl EmbeddingSet {
    /// Builds a set, fixing up `record_count` and validating every record.
    pub fn new(mut header: EmbeddingSetHeader, records: Vec<DocumentEmbedding>) -> Result<Self> {
        header.record_count = records.len() as u64;
        header.validate()?;
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            r.validate(&header)?;
            if !seen.insert(r.doc_id.as_str()) {
                return Err(Error::DuplicateDocId(r.doc_id.clone()));
            }
        }
        Ok(Self { header, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, doc_id: &str) -> Option<&DocumentEmbedding> {
        self.records.iter().find(|r| r.doc_id == doc_id)
    }

    /// Keeps only the listed records, in the order given.
    pub fn subset(&self, doc_ids: &[String]) -> Result<Self> {
        let by_id: std::collections::HashMap<&str, &DocumentEmbedding> = self
            .records
            .iter()
            .map(|r| (r.doc_id.as_str(), r))
            .collect();
        let records = doc_ids
            .iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|r| (*r).clone())
                    .ok_or_else(|| Error::UnknownDocId(id.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.header.clone(), records)
    }
}

/// Pools token states into a single vector.
///
/// `mean` averages every row, `cls` copies row 0. Pre-pooled sets have no
/// token states to pool.
pub fn pool(states: &TokenStates, method: Pooling) -> Result<Vec<f64>> {
    pool_rows(states, method, |_| true)
}

/// Pools with some rows zeroed out. Zeroed rows still count toward the mean's
/// denominator.
pub(crate) fn pool_rows(
    states: &TokenStates,
    method: Pooling,
    keep: impl Fn(usize) -> bool,
) -> Result<Vec<f64>> {
    if states.rows() == 0 {
        return Err(Error::EmptyTokenStates);
    }
    let d = states.dim();
    match method {
        Pooling::Mean => {
            let mut acc = vec![0.0f64; d];
            for t in (0..states.rows()).filter(|&t| keep(t)) {
                for (a, &x) in acc.iter_mut().zip(states.row(t)) {
                    *a += f64::from(x);
                }
            }
            let n = states.rows() as f64;
            acc.iter_mut().for_each(|a| *a /= n);
            Ok(acc)
        }
        Pooling::Cls => {
            if keep(0) {
                Ok(crate::vector::to_f64(states.row(0)))
            } else {
                Ok(vec![0.0; d])
            }
        }
        Pooling::PrePooled => Err(Error::InvalidConfig(
            "cannot pool token states with method pre-pooled".into(),
        )),
    }
}
