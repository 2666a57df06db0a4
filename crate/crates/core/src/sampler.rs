//! Document-as-query pseudo-labelling: dropout perturbation of the query
//! representation, positive selection from the retrieved candidate pool, and
//! hard negatives per positive. Also the uniform corpus subsampler.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{pool_rows, DocumentEmbedding, Pooling};
use crate::error::{Error, Result};
use crate::knn::CosineIndex;
use crate::seed;
use crate::vector;

/// Perturbed vectors below this norm are treated as degenerate.
const MIN_PERTURBED_NORM: f64 = 1e-9;
const MAX_RESAMPLES: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbMode {
    /// One Bernoulli bit per token row, then re-pool.
    TokenMask,
    /// One Bernoulli bit per coordinate of the pooled vector.
    ElementMask,
    None,
}

/// Where hard negatives are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativePool {
    /// Candidate-pool ranks p+1..k.
    CandidatePool,
    /// Every document except the query and its positives.
    RestOfCorpus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub dropout_rate: f64,
    pub num_positives: usize,
    pub num_negatives: usize,
    pub candidate_pool_size: usize,
    pub perturb_mode: PerturbMode,
    pub masks_per_doc: u32,
    pub subsample_fraction: f64,
    pub negatives: NegativePool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            dropout_rate: 0.02,
            num_positives: 8,
            num_negatives: 4,
            candidate_pool_size: 100,
            perturb_mode: PerturbMode::TokenMask,
            masks_per_doc: 1,
            subsample_fraction: 1.0,
            negatives: NegativePool::CandidatePool,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} not in [0, 1)", self.dropout_rate));
        }
        if self.num_positives == 0 || self.num_negatives == 0 || self.candidate_pool_size == 0 {
            return bad(
                "num_positives, num_negatives and candidate_pool_size must be positive".into(),
            );
        }
        if self.num_positives >= self.candidate_pool_size {
            return bad(format!(
                "num_positives ({}) must be smaller than candidate_pool_size ({})",
                self.num_positives, self.candidate_pool_size
            ));
        }
        if self.masks_per_doc == 0 {
            return bad("masks_per_doc must be positive".into());
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return bad(format!(
                "subsample_fraction {} not in (0, 1]",
                self.subsample_fraction
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub vector: Vec<f64>,
    /// Every resample was degenerate and the unperturbed vector was used.
    pub fell_back: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePools {
    pub query_doc_id: String,
    pub perturbed_query: Vec<f64>,
    pub perturbation_fell_back: bool,
    pub positives: Vec<String>,
    pub negative_pool: Vec<String>,
    /// One entry per positive, in positive order.
    pub hard_negatives: Vec<(String, Vec<String>)>,
    pub(crate) positive_rows: Vec<usize>,
    pub(crate) hard_negative_rows: Vec<Vec<usize>>,
}

/// Applies Bernoulli(`dropout_rate`) masking to the document's query
/// representation. Masked entries are zeroed with no 1/(1-p) rescaling.
pub fn perturb_query(
    doc: &DocumentEmbedding,
    pooling: Pooling,
    config: &SamplerConfig,
    rng_seed: u64,
) -> Result<Perturbation> {
    if config.perturb_mode == PerturbMode::TokenMask && doc.token_states.is_none() {
        return Err(Error::MissingTokenStates(doc.doc_id.clone()));
    }
    let unperturbed = || Perturbation {
        vector: doc.pooled_f64(),
        fell_back: false,
    };
    if config.perturb_mode == PerturbMode::None || config.dropout_rate == 0.0 {
        return Ok(unperturbed());
    }

    let mut seed = rng_seed;
    for attempt in 0..=MAX_RESAMPLES {
        if attempt > 0 {
            seed = seed::resample_seed(rng_seed, attempt);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = match (config.perturb_mode, &doc.token_states) {
            (PerturbMode::TokenMask, Some(states)) => {
                let mask: Vec<bool> = (0..states.rows())
                    .map(|_| rng.random::<f64>() < config.dropout_rate)
                    .collect();
                apply_token_mask(doc, pooling, &mask)?
            }
            _ => {
                let mask: Vec<bool> = (0..doc.pooled.len())
                    .map(|_| rng.random::<f64>() < config.dropout_rate)
                    .collect();
                apply_element_mask(doc, &mask)
            }
        };
        if vector::norm(&v) >= MIN_PERTURBED_NORM {
            return Ok(Perturbation {
                vector: v,
                fell_back: false,
            });
        }
    }
    log::warn!(
        "perturbation of {:?} stayed degenerate after {MAX_RESAMPLES} resamples; using the unperturbed vector",
        doc.doc_id
    );
    Ok(Perturbation {
        fell_back: true,
        ..unperturbed()
    })
}

/// Zeroes the masked token rows and pools. With nothing masked, the stored
/// pooled vector is returned unchanged.
pub(crate) fn apply_token_mask(
    doc: &DocumentEmbedding,
    pooling: Pooling,
    masked: &[bool],
) -> Result<Vec<f64>> {
    let states = doc
        .token_states
        .as_ref()
        .ok_or_else(|| Error::MissingTokenStates(doc.doc_id.clone()))?;
    if !masked.iter().any(|&m| m) {
        return Ok(doc.pooled_f64());
    }
    let pooling = if pooling == Pooling::PrePooled {
        Pooling::Mean
    } else {
        pooling
    };
    pool_rows(states, pooling, |t| !masked[t])
}

pub(crate) fn apply_element_mask(doc: &DocumentEmbedding, masked: &[bool]) -> Vec<f64> {
    doc.pooled
        .iter()
        .zip(masked)
        .map(|(&x, &m)| if m { 0.0 } else { f64::from(x) })
        .collect()
}

/// Retrieves the candidate pool for `doc` acting as its own query and splits
/// it into positives, a negative pool, and per-positive hard negatives.
pub fn build_candidate_pools(
    index: &CosineIndex,
    doc: &DocumentEmbedding,
    pooling: Pooling,
    config: &SamplerConfig,
    rng_seed: u64,
) -> Result<CandidatePools> {
    if index.len() < 2 {
        return Err(Error::CorpusTooSmall {
            needed: 2,
            have: index.len(),
        });
    }
    let self_row = index
        .position(&doc.doc_id)
        .ok_or_else(|| Error::UnknownDocId(doc.doc_id.clone()))?;
    let perturbation = perturb_query(doc, pooling, config, rng_seed)?;

    let pool = index.search_rows(&perturbation.vector, config.candidate_pool_size, |r| {
        r == self_row
    })?;
    let split = config.num_positives.min(pool.len());
    let positive_rows: Vec<usize> = pool[..split].iter().map(|&(r, _)| r).collect();
    let negative_rows: Vec<usize> = match config.negatives {
        NegativePool::CandidatePool => pool[split..].iter().map(|&(r, _)| r).collect(),
        NegativePool::RestOfCorpus => index
            .search_rows(&perturbation.vector, index.len(), |r| {
                r == self_row || positive_rows.contains(&r)
            })?
            .into_iter()
            .map(|(r, _)| r)
            .collect(),
    };

    let hard_negative_rows: Vec<Vec<usize>> = positive_rows
        .iter()
        .map(|&p| {
            index
                .rank_rows(index.row(p), &negative_rows, config.num_negatives)
                .into_iter()
                .map(|(r, _)| r)
                .collect()
        })
        .collect();

    let ids = |rows: &[usize]| -> Vec<String> {
        rows.iter().map(|&r| index.doc_id(r).to_string()).collect()
    };
    Ok(CandidatePools {
        query_doc_id: doc.doc_id.clone(),
        perturbed_query: perturbation.vector,
        perturbation_fell_back: perturbation.fell_back,
        positives: ids(&positive_rows),
        negative_pool: ids(&negative_rows),
        hard_negatives: positive_rows
            .iter()
            .zip(&hard_negative_rows)
            .map(|(&p, negs)| (index.doc_id(p).to_string(), ids(negs)))
            .collect(),
        positive_rows,
        hard_negative_rows,
    })
}

/// Uniform sample without replacement of ceil(fraction * N) ids, returned in
/// their original order.
pub fn subsample_corpus(doc_ids: &[String], fraction: f64, rng_seed: u64) -> Result<Vec<String>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "subsample fraction {fraction} not in (0, 1]"
        )));
    }
    let n = doc_ids.len();
    // Guard against 0.1 * 1000 landing a hair above 100 in floating point.
    let want = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let want = want.clamp(usize::from(n > 0), n);
    if want == n {
        return Ok(doc_ids.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut picked = index::sample(&mut rng, n, want).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| doc_ids[i].clone()).collect())
}
