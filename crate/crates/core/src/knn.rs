//! Exact cosine top-k search over a unit-normalized embedding matrix.
//!
//! Results are ordered by similarity descending, ties by `doc_id` ascending,
//! so every consumer (pool construction, retrieval runs) is reproducible.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};
use crate::vector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub doc_id: String,
    pub similarity: f64,
}

#[derive(Debug, Clone)]
pub struct CosineIndex {
    retriever_id: String,
    dim: usize,
    doc_ids: Vec<String>,
    positions: HashMap<String, usize>,
    unit_rows: Vec<f64>,
}

impl CosineIndex {
    pub fn build(set: &EmbeddingSet) -> Result<Self> {
        Self::from_vectors(
            &set.header.retriever_id,
            set.records
                .iter()
                .map(|r| (r.doc_id.clone(), r.pooled_f64())),
        )
    }

    pub fn from_vectors<I>(retriever_id: &str, vectors: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<f64>)>,
    {
        let mut doc_ids = Vec::new();
        let mut positions = HashMap::new();
        let mut unit_rows = Vec::new();
        let mut dim = None;
        for (id, v) in vectors {
            let d = *dim.get_or_insert(v.len());
            if v.len() != d {
                return Err(Error::DimensionMismatch {
                    doc_id: id,
                    expected: d,
                    found: v.len(),
                });
            }
            if !vector::is_finite(&v) {
                return Err(Error::NonFinite(id));
            }
            let unit = vector::normalized(&v).ok_or_else(|| Error::ZeroNorm(id.clone()))?;
            if positions.insert(id.clone(), doc_ids.len()).is_some() {
                return Err(Error::DuplicateDocId(id));
            }
            unit_rows.extend_from_slice(&unit);
            doc_ids.push(id);
        }
        let dim = dim.ok_or(Error::EmptyInput("index needs at least one document"))?;
        if dim == 0 {
            return Err(Error::EmptyInput("zero-dimensional embeddings"));
        }
        Ok(Self {
            retriever_id: retriever_id.to_string(),
            dim,
            doc_ids,
            positions,
            unit_rows,
        })
    }

    pub fn retriever_id(&self) -> &str {
        &self.retriever_id
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn doc_id(&self, row: usize) -> &str {
        &self.doc_ids[row]
    }

    pub fn position(&self, doc_id: &str) -> Option<usize> {
        self.positions.get(doc_id).copied()
    }

    /// Unit-normalized embedding stored at `row`.
    pub fn row(&self, row: usize) -> &[f64] {
        &self.unit_rows[row * self.dim..(row + 1) * self.dim]
    }

    /// Top-`k` documents by cosine similarity, skipping ids in `exclude`.
    pub fn search(
        &self,
        query: &[f64],
        k: usize,
        exclude: Option<&HashSet<String>>,
    ) -> Result<Vec<Neighbor>> {
        let hits = self.search_rows(query, k, |row| {
            exclude.is_some_and(|ex| ex.contains(&self.doc_ids[row]))
        })?;
        Ok(hits
            .into_iter()
            .map(|(row, similarity)| Neighbor {
                doc_id: self.doc_ids[row].clone(),
                similarity,
            })
            .collect())
    }

    /// Row-level search used by the sampler; `skip(row)` excludes a row.
    pub fn search_rows(
        &self,
        query: &[f64],
        k: usize,
        skip: impl Fn(usize) -> bool,
    ) -> Result<Vec<(usize, f64)>> {
        let unit = self.unit_query(query)?;
        if k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        let scored = (0..self.len())
            .filter(|&row| !skip(row))
            .map(|row| (row, vector::dot(self.row(row), &unit)));
        Ok(self.select_top(scored, k))
    }

    /// Ranks an explicit candidate list of rows against a unit query.
    pub fn rank_rows(&self, unit_query: &[f64], rows: &[usize], k: usize) -> Vec<(usize, f64)> {
        let scored = rows
            .iter()
            .map(|&row| (row, vector::dot(self.row(row), unit_query)));
        self.select_top(scored, k)
    }

    pub fn unit_query(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                doc_id: "<query>".into(),
                expected: self.dim,
                found: query.len(),
            });
        }
        if !vector::is_finite(query) {
            return Err(Error::NonFinite("<query>".into()));
        }
        vector::normalized(query).ok_or_else(|| Error::ZeroNorm("<query>".into()))
    }

    fn select_top(
        &self,
        scored: impl Iterator<Item = (usize, f64)>,
        k: usize,
    ) -> Vec<(usize, f64)> {
        let mut heap: BinaryHeap<Ranked<'_>> = BinaryHeap::with_capacity(k + 1);
        for (row, sim) in scored {
            let cand = Ranked {
                sim,
                id: &self.doc_ids[row],
                row,
            };
            if heap.len() < k {
                heap.push(cand);
            } else if let Some(worst) = heap.peek() {
                if cand < *worst {
                    heap.pop();
                    heap.push(cand);
                }
            }
        }
        let mut out = heap.into_vec();
        out.sort();
        out.into_iter().map(|r| (r.row, r.sim)).collect()
    }
}

/// Heap entry ordered so that "less" means "ranks earlier".
struct Ranked<'a> {
    sim: f64,
    id: &'a str,
    row: usize,
}

impl Ord for Ranked<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .sim
            .total_cmp(&self.sim)
            .then_with(|| self.id.cmp(other.id))
    }
}

impl PartialOrd for Ranked<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Ranked<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked<'_> {}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn index(vectors: &[(&str, Vec<f64>)]) -> CosineIndex {
        CosineIndex::from_vectors("r", vectors.iter().map(|(i, v)| (i.to_string(), v.clone())))
            .unwrap()
    }

    /// Full scan plus full sort.
    fn brute_force(raw: &[Vec<f64>], ids: &[String], q: &[f64], k: usize) -> Vec<(String, f64)> {
        let qn: Vec<f64> = {
            let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            q.iter().map(|x| x / n).collect()
        };
        let mut all: Vec<(String, f64)> = raw
            .iter()
            .zip(ids)
            .map(|(v, id)| {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                let mut s = 0.0;
                for (a, b) in v.iter().zip(&qn) {
                    s += (a / n) * b;
                }
                (id.clone(), s)
            })
            .collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn rows_are_normalized() {
        let idx = index(&[("a", vec![3.0, 4.0])]);
        assert_eq!(idx.row(0), &[0.6, 0.8]);
    }

    #[test]
    fn zero_vector_rejected() {
        let err = CosineIndex::from_vectors("r", [("z".to_string(), vec![0.0, 0.0])]).unwrap_err();
        assert!(err.to_string().contains("zero-norm embedding"));
    }

    #[test]
    fn duplicate_and_empty_rejected() {
        let dup = CosineIndex::from_vectors(
            "r",
            [("a".to_string(), vec![1.0]), ("a".to_string(), vec![2.0])],
        );
        assert!(matches!(dup, Err(Error::DuplicateDocId(_))));
        assert!(CosineIndex::from_vectors("r", std::iter::empty()).is_err());
    }

    #[test]
    fn many_rows_have_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let idx = CosineIndex::from_vectors(
            "r",
            (0..1000).map(|i| {
                (
                    format!("d{i}"),
                    (0..32).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
            }),
        )
        .unwrap();
        for r in 0..idx.len() {
            assert!((vector::norm(idx.row(r)) - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn self_exclusion_and_clamping() {
        let idx = index(&[
            ("a", vec![1.0, 0.0]),
            ("b", vec![1.0, 1.0]),
            ("c", vec![0.0, 1.0]),
        ]);
        let ex: HashSet<String> = ["a".to_string()].into();
        let hits = idx.search(&[1.0, 0.0], 10, Some(&ex)).unwrap();
        assert_eq!(hits.len(), 2);
        assert!(hits.iter().all(|h| h.doc_id != "a"));
        assert_eq!(hits[0].doc_id, "b");
        let all = idx.search(&[1.0, 0.0], 10, None).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(all[0].doc_id, "a");
    }

    #[test]
    fn ties_break_by_doc_id() {
        let idx = index(&[
            ("z", vec![1.0, 0.0]),
            ("m", vec![2.0, 0.0]),
            ("a", vec![0.5, 0.0]),
        ]);
        let hits = idx.search(&[1.0, 0.0], 2, None).unwrap();
        let ids: Vec<_> = hits.iter().map(|h| h.doc_id.as_str()).collect();
        assert_eq!(ids, ["a", "m"]);
    }

    #[test]
    fn zero_query_rejected() {
        let idx = index(&[("a", vec![1.0, 0.0])]);
        assert!(matches!(
            idx.search(&[0.0, 0.0], 1, None),
            Err(Error::ZeroNorm(_))
        ));
        assert!(idx.search(&[1.0, 0.0], 0, None).is_err());
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let raw: Vec<Vec<f64>> = (0..500)
            .map(|_| (0..24).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let ids: Vec<String> = (0..500).map(|i| format!("doc{i:04}")).collect();
        let idx =
            CosineIndex::from_vectors("r", ids.iter().cloned().zip(raw.iter().cloned())).unwrap();
        for _ in 0..50 {
            let q: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got: Vec<(String, f64)> = idx
                .search(&q, 50, None)
                .unwrap()
                .into_iter()
                .map(|n| (n.doc_id, n.similarity))
                .collect();
            assert_eq!(got, brute_force(&raw, &ids, &q, 50));
        }
    }

    proptest::proptest! {
        #[test]
        fn similarity_is_symmetric(
            a in proptest::collection::vec(-5.0f64..5.0, 6),
            b in proptest::collection::vec(-5.0f64..5.0, 6),
        ) {
            proptest::prop_assume!(vector::norm(&a) > 1e-3 && vector::norm(&b) > 1e-3);
            let idx_a = CosineIndex::from_vectors("r", [("a".to_string(), a.clone())]).unwrap();
            let idx_b = CosineIndex::from_vectors("r", [("b".to_string(), b.clone())]).unwrap();
            let ab = idx_a.search(&b, 1, None).unwrap()[0].similarity;
            let ba = idx_b.search(&a, 1, None).unwrap()[0].similarity;
            proptest::prop_assert!((ab - ba).abs() <= 1e-12);
            proptest::prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&ab));
        }
    }
}
