use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kernel::{grad_norm, LossQuery};
use super::ScoringConfig;
use crate::embedding::{DocumentEmbedding, Pooling};
use crate::error::{Error, Result};
use crate::io;
use crate::knn::CosineIndex;
use crate::sampler::build_candidate_pools;
use crate::seed::document_seed;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradNormScore {
    pub doc_id: String,
    pub score: f64,
    /// One entry per (mask, positive), masks in order.
    pub per_positive_norms: Vec<f64>,
    pub rng_seed: u64,
    pub config_digest: String,
}

/// On-disk form of a score, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRecord {
    pub doc_id: String,
    pub score: f64,
    pub per_positive_norms: Vec<f64>,
    pub seed: u64,
    pub config_digest: String,
    pub tool_version: String,
}

impl From<&GradNormScore> for ScoreRecord {
    fn from(s: &GradNormScore) -> Self {
        Self {
            doc_id: s.doc_id.clone(),
            score: s.score,
            per_positive_norms: s.per_positive_norms.clone(),
            seed: s.rng_seed,
            config_digest: s.config_digest.clone(),
            tool_version: TOOL_VERSION.to_string(),
        }
    }
}

impl From<ScoreRecord> for GradNormScore {
    fn from(r: ScoreRecord) -> Self {
        Self {
            doc_id: r.doc_id,
            score: r.score,
            per_positive_norms: r.per_positive_norms,
            rng_seed: r.seed,
            config_digest: r.config_digest,
        }
    }
}

/// Scores documents against a fixed corpus index.
pub struct Scorer<'a> {
    index: &'a CosineIndex,
    pooling: Pooling,
    config: ScoringConfig,
    digest: String,
    global_seed: u64,
}

impl<'a> Scorer<'a> {
    pub fn new(
        index: &'a CosineIndex,
        pooling: Pooling,
        config: ScoringConfig,
        global_seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let digest = config.digest();
        Ok(Self {
            index,
            pooling,
            config,
            digest,
            global_seed,
        })
    }

    pub fn config_digest(&self) -> &str {
        &self.digest
    }

    pub fn score(&self, doc: &DocumentEmbedding) -> Result<GradNormScore> {
        let sampler = &self.config.sampler;
        let mut norms = Vec::new();
        for mask in 0..sampler.masks_per_doc {
            let seed = document_seed(self.global_seed, &doc.doc_id, mask);
            let pools = build_candidate_pools(self.index, doc, self.pooling, sampler, seed)?;
            let query = match self.config.loss.loss_query {
                LossQuery::Unperturbed => doc.pooled_f64(),
                LossQuery::Perturbed => pools.perturbed_query.clone(),
            };
            for (&p, negs) in pools.positive_rows.iter().zip(&pools.hard_negative_rows) {
                let neg_rows: Vec<&[f64]> = negs.iter().map(|&r| self.index.row(r)).collect();
                norms.push(grad_norm(
                    &query,
                    self.index.row(p),
                    &neg_rows,
                    &self.config.loss,
                )?);
            }
        }
        if norms.is_empty() {
            return Err(Error::CorpusTooSmall {
                needed: 2,
                have: self.index.len(),
            });
        }
        let score = norms.iter().sum::<f64>() / norms.len() as f64;
        Ok(GradNormScore {
            doc_id: doc.doc_id.clone(),
            score,
            per_positive_norms: norms,
            rng_seed: self.global_seed,
            config_digest: self.digest.clone(),
        })
    }

    /// Scores in parallel on `workers` threads; the result is sorted by doc_id
    /// and independent of the worker count.
    pub fn score_all(
        &self,
        docs: &[&DocumentEmbedding],
        workers: usize,
    ) -> Result<Vec<GradNormScore>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
        let mut out: Vec<GradNormScore> = pool.install(|| {
            docs.par_iter()
                .map(|d| self.score(d))
                .collect::<Result<_>>()
        })?;
        out.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        Ok(out)
    }
}

/// One-shot score of a single document.
pub fn gradnormir_score(
    doc: &DocumentEmbedding,
    index: &CosineIndex,
    pooling: Pooling,
    config: &ScoringConfig,
    global_seed: u64,
) -> Result<GradNormScore> {
    Scorer::new(index, pooling, config.clone(), global_seed)?.score(doc)
}

pub fn write_score_file(path: &Path, scores: &[GradNormScore]) -> Result<()> {
    let mut records: Vec<ScoreRecord> = scores.iter().map(ScoreRecord::from).collect();
    records.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    io::write_jsonl(path, &records)
}

/// Reads a score file; every record must share one config digest.
pub fn read_score_file(path: &Path) -> Result<Vec<GradNormScore>> {
    let records: Vec<ScoreRecord> = io::read_jsonl(path)?;
    if let Some(first) = records.first() {
        if let Some(other) = records
            .iter()
            .find(|r| r.config_digest != first.config_digest)
        {
            return Err(Error::DigestMismatch {
                calibration: first.config_digest.clone(),
                scores: other.config_digest.clone(),
            });
        }
    }
    let mut seen = std::collections::HashSet::new();
    for r in &records {
        if !seen.insert(r.doc_id.as_str()) {
            return Err(Error::DuplicateDocId(r.doc_id.clone()));
        }
    }
    Ok(records.into_iter().map(GradNormScore::from).collect())
}
