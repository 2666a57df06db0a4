//! Client for a remote embedding service.
//!
//! `POST {endpoint}/embed` with `{"texts": [...], "token_states": bool}`;
//! the service answers `{"dimension": D, "embeddings": [{"pooled": [...],
//! "token_states": [[...]] | null}]}` in input order.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{CorpusDoc, DocumentEmbedding, EmbeddingSet, EmbeddingSetHeader, Pooling, TokenStates};
use crate::error::{Error, Result};

#[derive(Debug, Serialize)]
pub struct EmbedRequest<'a> {
    pub texts: Vec<&'a str>,
    pub token_states: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingResponse {
    pub dimension: usize,
    pub embeddings: Vec<ServiceEmbedding>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServiceEmbedding {
    pub pooled: Vec<f32>,
    #[serde(default)]
    pub token_states: Option<Vec<Vec<f32>>>,
}

#[derive(Debug, Clone)]
pub struct EmbeddingClient {
    endpoint: String,
    agent: ureq::Agent,
    max_batch: usize,
    max_retries: u32,
    retry_delay: Duration,
}

impl EmbeddingClient {
    pub fn new(endpoint: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            agent,
            max_batch: 64,
            max_retries: 3,
            retry_delay: Duration::from_millis(200),
        }
    }

    pub fn with_max_batch(mut self, max_batch: usize) -> Self {
        self.max_batch = max_batch.max(1);
        self
    }

    pub fn with_retries(mut self, max_retries: u32, delay: Duration) -> Self {
        self.max_retries = max_retries;
        self.retry_delay = delay;
        self
    }

    /// Embeds `texts` in order. Records get their position as `doc_id`.
    ///
    /// Batches larger than the configured maximum are split; every batch must
    /// report the same dimension.
    pub fn fetch_embeddings<S: AsRef<str>>(
        &self,
        texts: &[S],
        want_token_states: bool,
    ) -> Result<Vec<DocumentEmbedding>> {
        let mut out = Vec::with_capacity(texts.len());
        let mut dimension: Option<usize> = None;
        for chunk in texts.chunks(self.max_batch) {
            let resp = self.post_with_retry(chunk, want_token_states)?;
            if let Some(d) = dimension {
                if d != resp.dimension {
                    return Err(Error::DimensionDrift {
                        expected: d,
                        found: resp.dimension,
                    });
                }
            }
            dimension = Some(resp.dimension);
            if resp.embeddings.len() != chunk.len() {
                return Err(Error::Service {
                    status: 200,
                    body: format!(
                        "expected {} embeddings, received {}",
                        chunk.len(),
                        resp.embeddings.len()
                    ),
                });
            }
            for e in resp.embeddings {
                let doc_id = out.len().to_string();
                out.push(into_document(doc_id, e, resp.dimension)?);
            }
        }
        Ok(out)
    }

    /// Embeds a BEIR corpus into an in-memory set keyed by corpus ids.
    pub fn embed_corpus(
        &self,
        docs: &[CorpusDoc],
        retriever_id: &str,
        pooling: Pooling,
        want_token_states: bool,
    ) -> Result<EmbeddingSet> {
        let texts: Vec<String> = docs.iter().map(CorpusDoc::full_text).collect();
        let mut records = self.fetch_embeddings(&texts, want_token_states)?;
        for (r, d) in records.iter_mut().zip(docs) {
            r.doc_id = d.id.clone();
        }
        let dim = records.first().map(|r| r.pooled.len()).unwrap_or(1);
        let mut header = EmbeddingSetHeader::new(retriever_id, dim, pooling);
        header.has_token_states = want_token_states && pooling != Pooling::PrePooled;
        if !header.has_token_states {
            records.iter_mut().for_each(|r| r.token_states = None);
        }
        EmbeddingSet::new(header, records)
    }

    fn post_with_retry<S: AsRef<str>>(
        &self,
        texts: &[S],
        token_states: bool,
    ) -> Result<EmbeddingResponse> {
        let mut attempt = 0;
        loop {
            match self.post(texts, token_states) {
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    attempt += 1;
                    log::warn!("embedding service attempt {attempt} failed: {e}; retrying");
                    std::thread::sleep(self.retry_delay * attempt);
                }
                other => return other,
            }
        }
    }

    fn post<S: AsRef<str>>(&self, texts: &[S], token_states: bool) -> Result<EmbeddingResponse> {
        let url = format!("{}/embed", self.endpoint);
        let request = EmbedRequest {
            texts: texts.iter().map(AsRef::as_ref).collect(),
            token_states,
        };
        let mut resp = self
            .agent
            .post(&url)
            .send_json(&request)
            .map_err(|e| Error::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .with_config()
            .limit(u64::MAX)
            .read_to_string()
            .map_err(|e| Error::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(Error::Service { status, body });
        }
        serde_json::from_str(&body).map_err(|e| Error::Parse {
            path: url,
            line: e.line(),
            message: e.to_string(),
        })
    }
}

fn into_document(
    doc_id: String,
    e: ServiceEmbedding,
    dimension: usize,
) -> Result<DocumentEmbedding> {
    if e.pooled.len() != dimension {
        return Err(Error::DimensionMismatch {
            doc_id,
            expected: dimension,
            found: e.pooled.len(),
        });
    }
    if e.pooled.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(doc_id));
    }
    let token_states = match e.token_states {
        Some(rows) => {
            let ts = TokenStates::from_rows(&rows)?;
            if ts.dim() != dimension {
                return Err(Error::DimensionMismatch {
                    doc_id,
                    expected: dimension,
                    found: ts.dim(),
                });
            }
            if ts.as_slice().iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(doc_id));
            }
            Some(ts)
        }
        None => None,
    };
    Ok(DocumentEmbedding {
        doc_id,
        pooled: e.pooled,
        token_states,
    })
}
