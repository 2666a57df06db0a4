//! JSONL inputs: the fallback embedding format and BEIR-style corpus and
//! query text files.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{format, DocumentEmbedding, EmbeddingSet, EmbeddingSetHeader, Pooling};
use crate::error::{Error, Result};
use crate::io::read_jsonl;

#[derive(Debug, Deserialize)]
struct EmbeddingLine {
    #[serde(rename = "_id")]
    id: String,
    embedding: Vec<f32>,
}

/// Reads `{"_id": ..., "embedding": [...]}` lines as a pre-pooled set.
pub fn read_embedding_jsonl(path: impl AsRef<Path>, retriever_id: &str) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let lines: Vec<EmbeddingLine> = read_jsonl(path)?;
    let dimension = lines.first().map(|l| l.embedding.len()).unwrap_or(1);
    let header = EmbeddingSetHeader::new(retriever_id, dimension, Pooling::PrePooled);
    let records = lines
        .into_iter()
        .map(|l| DocumentEmbedding::new(l.id, l.embedding))
        .collect();
    EmbeddingSet::new(header, records)
}

/// Opens an embedding set, choosing the binary or JSONL reader by sniffing
/// the first bytes. JSONL sets take their retriever id from the file stem.
pub fn open_embedding_set(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let mut head = [0u8; 4];
    let n = File::open(path)
        .and_then(|mut f| f.read(&mut head))
        .map_err(|e| Error::io(path, e))?;
    if n == 4 && &head == format::MAGIC {
        return format::read_embedding_set(path);
    }
    let first = head[..n].iter().find(|b| !b.is_ascii_whitespace());
    match first {
        Some(b'{') => {
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            read_embedding_jsonl(path, &stem)
        }
        _ => Err(Error::BadMagic(head)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusDoc {
    #[serde(rename = "_id")]
    pub id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub text: String,
}

impl CorpusDoc {
    /// Title and body joined the way BEIR encoders usually see them.
    pub fn full_text(&self) -> String {
        if self.title.is_empty() {
            self.text.clone()
        } else {
            format!("{} {}", self.title, self.text)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryText {
    #[serde(rename = "_id")]
    pub id: String,
    pub text: String,
}

pub fn read_corpus_jsonl(path: impl AsRef<Path>) -> Result<Vec<CorpusDoc>> {
    read_jsonl(path.as_ref())
}

pub fn read_queries_jsonl(path: impl AsRef<Path>) -> Result<Vec<QueryText>> {
    read_jsonl(path.as_ref())
}
