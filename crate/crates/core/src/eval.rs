//! Retrieval metrics: runs, Recall@K, document retrieval rate, per-document
//! d2q recall and quartile analysis.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knn::{CosineIndex, Neighbor};

pub const DEFAULT_K: usize = 100;

/// Relevance judgements; only grades >= 1 are kept.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Qrels {
    forward: BTreeMap<String, BTreeMap<String, u32>>,
    inverse: BTreeMap<String, BTreeSet<String>>,
}

impl Qrels {
    pub fn from_triples<I, Q, D>(triples: I) -> Self
    where
        I: IntoIterator<Item = (Q, D, i64)>,
        Q: Into<String>,
        D: Into<String>,
    {
        let mut q = Qrels::default();
        for (query, doc, grade) in triples {
            q.insert(query.into(), doc.into(), grade);
        }
        q
    }

    fn insert(&mut self, query: String, doc: String, grade: i64) {
        // Queries whose judgements are all zero stay visible so recall can count them.
        let rels = self.forward.entry(query.clone()).or_default();
        if grade >= 1 {
            rels.insert(doc.clone(), grade.min(i64::from(u32::MAX)) as u32);
            self.inverse.entry(doc).or_default().insert(query);
        }
    }

    /// BEIR layout: tab-separated `query-id  corpus-id  score` with a header.
    pub fn read_tsv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .has_headers(true)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let mut q = Qrels::default();
        for row in reader.records() {
            let row = row.map_err(|e| csv_error(path, e))?;
            let line = row.position().map_or(0, |p| p.line() as usize);
            let field = |i: usize| {
                row.get(i).map(str::trim).ok_or_else(|| Error::Parse {
                    path: path.display().to_string(),
                    line,
                    message: format!("expected 3 columns, found {}", row.len()),
                })
            };
            let (query, doc, grade) = (field(0)?, field(1)?, field(2)?);
            let grade: i64 = grade
                .parse()
                .or_else(|_| grade.parse::<f64>().map(|g| g as i64))
                .map_err(|_| Error::Parse {
                    path: path.display().to_string(),
                    line,
                    message: format!("bad relevance grade {grade:?}"),
                })?;
            q.insert(query.to_string(), doc.to_string(), grade);
        }
        Ok(q)
    }

    pub fn relevant(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.forward.get(query_id)
    }

    /// Queries judging `doc_id` relevant.
    pub fn queries_for(&self, doc_id: &str) -> Option<&BTreeSet<String>> {
        self.inverse.get(doc_id)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.forward.keys().map(String::as_str)
    }

    pub fn judged_docs(&self) -> impl Iterator<Item = &str> {
        self.inverse.keys().map(String::as_str)
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRun {
    pub k: usize,
    pub results: BTreeMap<String, Vec<Neighbor>>,
}

impl RetrievalRun {
    fn top_k(&self, query_id: &str) -> &[Neighbor] {
        self.results
            .get(query_id)
            .map_or(&[], |r| &r[..r.len().min(self.k)])
    }

    fn retrieved(&self, query_id: &str, doc_id: &str) -> bool {
        self.top_k(query_id).iter().any(|n| n.doc_id == doc_id)
    }

    /// Same run cut to a smaller K.
    pub fn truncated(&self, k: usize) -> RetrievalRun {
        let k = k.min(self.k);
        RetrievalRun {
            k,
            results: self
                .results
                .iter()
                .map(|(q, r)| (q.clone(), r[..r.len().min(k)].to_vec()))
                .collect(),
        }
    }
}

/// Top-K search for each query against the full index.
pub fn retrieval_run<'a, I>(index: &CosineIndex, queries: I, k: usize) -> Result<RetrievalRun>
where
    I: IntoIterator<Item = (&'a str, &'a [f64])>,
{
    let mut results = BTreeMap::new();
    for (id, vector) in queries {
        if results
            .insert(id.to_string(), index.search(vector, k, None)?)
            .is_some()
        {
            return Err(Error::DuplicateDocId(id.to_string()));
        }
    }
    Ok(RetrievalRun { k, results })
}

/// Fraction of (document, relevant query) pairs over `docs` where the query's
/// top-K contains the document. Documents without judgements contribute
/// nothing.
pub fn drr<'a, I>(run: &RetrievalRun, qrels: &Qrels, docs: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut hits = 0usize;
    let mut total = 0usize;
    let unique: BTreeSet<&str> = docs.into_iter().collect();
    for doc in unique {
        for q in qrels.queries_for(doc).into_iter().flatten() {
            total += 1;
            hits += usize::from(run.retrieved(q, doc));
        }
    }
    if total == 0 {
        return Err(Error::EmptyInput(
            "no relevant queries for the document subset",
        ));
    }
    Ok(hits as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub recall: f64,
    pub evaluated_queries: usize,
    pub skipped_queries: usize,
}

/// Macro-averaged Recall@K. Queries with no relevant documents are skipped.
pub fn recall_at_k(run: &RetrievalRun, qrels: &Qrels, k: usize) -> Result<RecallReport> {
    let mut sum = 0.0;
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    for (query, rels) in &qrels.forward {
        if rels.is_empty() {
            skipped += 1;
            continue;
        }
        let top = run.top_k(query);
        let top = &top[..top.len().min(k)];
        let found = top.iter().filter(|n| rels.contains_key(&n.doc_id)).count();
        sum += found as f64 / rels.len() as f64;
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(Error::EmptyInput("no query with relevant documents"));
    }
    Ok(RecallReport {
        recall: sum / evaluated as f64,
        evaluated_queries: evaluated,
        skipped_queries: skipped,
    })
}

/// Per judged document, the fraction of its relevant queries that retrieve it.
pub fn d2q_recall(run: &RetrievalRun, qrels: &Qrels) -> Result<BTreeMap<String, f64>> {
    if qrels.inverse.is_empty() {
        return Err(Error::EmptyInput("qrels"));
    }
    Ok(qrels
        .inverse
        .iter()
        .map(|(doc, queries)| {
            let hits = queries.iter().filter(|q| run.retrieved(q, doc)).count();
            (doc.clone(), hits as f64 / queries.len() as f64)
        })
        .collect())
}

/// Sorts documents present in both maps by score ascending (doc_id on ties),
/// splits them into four quartiles with extras going to the earlier ones, and
/// returns each quartile's mean d2q recall.
pub fn quartile_means(
    scores: &BTreeMap<String, f64>,
    d2q: &BTreeMap<String, f64>,
) -> Result<[f64; 4]> {
    let mut rows: Vec<(&str, f64, f64)> = scores
        .iter()
        .filter_map(|(id, &s)| d2q.get(id).map(|&r| (id.as_str(), s, r)))
        .collect();
    if rows.len() < 4 {
        return Err(Error::EmptyInput(
            "quartiles need at least four scored, judged documents",
        ));
    }
    rows.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(b.0)));
    let (base, extra) = (rows.len() / 4, rows.len() % 4);
    let mut means = [0.0; 4];
    let mut start = 0;
    for (q, mean) in means.iter_mut().enumerate() {
        let len = base + usize::from(q < extra);
        let slice = &rows[start..start + len];
        *mean = slice.iter().map(|r| r.2).sum::<f64>() / len as f64;
        start += len;
    }
    Ok(means)
}

pub fn robustness_gap(recall_in: f64, recall_ood: f64) -> f64 {
    (recall_in - recall_ood).abs()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub corpus_id: String,
    pub retriever_id: String,
    pub drr_all: f64,
    pub drr_ood_subset: Option<f64>,
    pub recall_at_k: RecallReport,
    pub k: usize,
    pub quartile_means: Option<[f64; 4]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub robustness_gap: Option<f64>,
    pub config_digest: String,
    pub global_seed: u64,
    pub tool_version: String,
}
