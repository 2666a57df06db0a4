//! InfoNCE loss over cosine similarities and the closed-form norm of its
//! gradient.
//!
//! Candidates are `e_0 = positive, e_1..e_n = negatives`, `s_k = cos(q, e_k)`,
//! and the loss is `-log softmax(s / tau)_0`. With softmax weights `p_k` the
//! logit coefficients are `c_k = (p_k - [k = 0]) / tau`, and
//!
//! ```text
//! d s_k / d q   = e_k / (|q||e_k|) - s_k q / |q|^2
//! d s_k / d e_k = q / (|q||e_k|)   - s_k e_k / |e_k|^2
//! ```
//!
//! The virtual-projection surface differentiates through a linear map `W`
//! applied to every embedding, at `W = I`:
//! `dL/dW = g_q q^T + sum_k g_k e_k^T` with `g_q = sum_k c_k ds_k/dq` and
//! `g_k = c_k ds_k/de_k`. Its Frobenius norm is taken from Gram matrices
//! rather than by materializing the D x D matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector::{dot, norm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradSurface {
    VirtualProjection,
    QueryEmbedding,
}

/// Which query vector enters the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossQuery {
    Unperturbed,
    Perturbed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    pub grad_surface: GradSurface,
    pub loss_query: LossQuery,
}

impl LossConfig {
    pub const DEFAULT_TEMPERATURE: f64 = 0.05;
    /// For retrievers whose similarity distribution is sharply skewed.
    pub const SKEWED_TEMPERATURE: f64 = 0.01;

    pub fn skewed() -> Self {
        Self {
            temperature: Self::SKEWED_TEMPERATURE,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: Self::DEFAULT_TEMPERATURE,
            grad_surface: GradSurface::VirtualProjection,
            loss_query: LossQuery::Unperturbed,
        }
    }
}

/// Outer-product factors of the virtual-projection gradient:
/// `dL/dW = sum_x left[x] right[x]^T`.
#[derive(Debug, Clone)]
pub struct GradientFactors {
    pub left: Vec<Vec<f64>>,
    pub right: Vec<Vec<f64>>,
}

struct Instance<'a> {
    query: &'a [f64],
    candidates: Vec<&'a [f64]>,
    query_norm: f64,
    norms: Vec<f64>,
    sims: Vec<f64>,
}

impl<'a> Instance<'a> {
    fn new(query: &'a [f64], positive: &'a [f64], negatives: &[&'a [f64]]) -> Result<Self> {
        let check = |v: &[f64], what: &str| -> Result<f64> {
            if v.len() != query.len() {
                return Err(Error::DimensionMismatch {
                    doc_id: what.to_string(),
                    expected: query.len(),
                    found: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(what.to_string()));
            }
            let n = norm(v);
            if n == 0.0 {
                return Err(Error::ZeroNorm(what.to_string()));
            }
            Ok(n)
        };
        let query_norm = check(query, "<query>")?;
        let mut candidates = Vec::with_capacity(negatives.len() + 1);
        candidates.push(positive);
        candidates.extend_from_slice(negatives);
        let mut norms = Vec::with_capacity(candidates.len());
        for (k, c) in candidates.iter().enumerate() {
            let label = if k == 0 {
                "<positive>".to_string()
            } else {
                format!("<negative {}>", k - 1)
            };
            norms.push(check(c, &label)?);
        }
        let sims = candidates
            .iter()
            .zip(&norms)
            .map(|(c, n)| dot(query, c) / (query_norm * n))
            .collect();
        Ok(Self {
            query,
            candidates,
            query_norm,
            norms,
            sims,
        })
    }

    /// Loss as `(m - z_0) + log1p(sum_{k != argmax} exp(z_k - m))`, which keeps
    /// full relative precision when the softmax saturates.
    fn loss(&self, tau: f64) -> f64 {
        let z: Vec<f64> = self.sims.iter().map(|s| s / tau).collect();
        let (top, m) = argmax(&z);
        let rest: f64 = z
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != top)
            .map(|(_, zk)| (zk - m).exp())
            .sum();
        ((m - z[0]) + rest.ln_1p()).max(0.0)
    }

    /// `c_k = (p_k - [k = 0]) / tau`, with `c_0` formed from the negatives'
    /// mass so it does not cancel when `p_0` rounds to 1.
    fn coefficients(&self, tau: f64) -> Vec<f64> {
        let z: Vec<f64> = self.sims.iter().map(|s| s / tau).collect();
        let (_, m) = argmax(&z);
        let w: Vec<f64> = z.iter().map(|zk| (zk - m).exp()).collect();
        let total: f64 = w.iter().sum();
        let negative_mass: f64 = w[1..].iter().sum();
        let mut c: Vec<f64> = w.iter().map(|wk| wk / total / tau).collect();
        c[0] = -(negative_mass / total) / tau;
        c
    }

    fn query_gradient(&self, c: &[f64]) -> Vec<f64> {
        let qn2 = self.query_norm * self.query_norm;
        let mut g = vec![0.0; self.query.len()];
        for (k, e) in self.candidates.iter().enumerate() {
            let a = c[k] / (self.query_norm * self.norms[k]);
            let b = c[k] * self.sims[k] / qn2;
            for ((gi, ei), qi) in g.iter_mut().zip(e.iter()).zip(self.query) {
                *gi += a * ei - b * qi;
            }
        }
        g
    }

    fn candidate_gradient(&self, c: &[f64], k: usize) -> Vec<f64> {
        let e = self.candidates[k];
        let a = c[k] / (self.query_norm * self.norms[k]);
        let b = c[k] * self.sims[k] / (self.norms[k] * self.norms[k]);
        self.query
            .iter()
            .zip(e.iter())
            .map(|(qi, ei)| a * qi - b * ei)
            .collect()
    }

    fn factors(&self, tau: f64) -> GradientFactors {
        let c = self.coefficients(tau);
        let mut left = Vec::with_capacity(self.candidates.len() + 1);
        let mut right = Vec::with_capacity(self.candidates.len() + 1);
        left.push(self.query_gradient(&c));
        right.push(self.query.to_vec());
        for k in 0..self.candidates.len() {
            left.push(self.candidate_gradient(&c, k));
            right.push(self.candidates[k].to_vec());
        }
        GradientFactors { left, right }
    }
}

fn argmax(z: &[f64]) -> (usize, f64) {
    let mut best = (0, z[0]);
    for (k, &v) in z.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (k, v);
        }
    }
    best
}

/// InfoNCE loss of `query` against one positive and any number of negatives.
pub fn infonce_loss(
    query: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    temperature: f64,
) -> Result<f64> {
    check_temperature(temperature)?;
    Ok(Instance::new(query, positive, negatives)?.loss(temperature))
}

/// L2 norm of the InfoNCE gradient on the configured surface.
pub fn grad_norm(
    query: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    config: &LossConfig,
) -> Result<f64> {
    check_temperature(config.temperature)?;
    let inst = Instance::new(query, positive, negatives)?;
    match config.grad_surface {
        GradSurface::QueryEmbedding => {
            let c = inst.coefficients(config.temperature);
            Ok(norm(&inst.query_gradient(&c)))
        }
        GradSurface::VirtualProjection => Ok(gram_frobenius(&inst.factors(config.temperature))),
    }
}

/// Gradient of the loss with respect to the query embedding.
pub fn query_gradient(
    query: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    temperature: f64,
) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    let inst = Instance::new(query, positive, negatives)?;
    Ok(inst.query_gradient(&inst.coefficients(temperature)))
}

/// Rank-one factors of the virtual-projection gradient.
pub fn virtual_projection_factors(
    query: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    temperature: f64,
) -> Result<GradientFactors> {
    check_temperature(temperature)?;
    Ok(Instance::new(query, positive, negatives)?.factors(temperature))
}

/// `|sum_x u_x v_x^T|_F` via `sum_{x,y} (u_x . u_y)(v_x . v_y)`.
pub fn gram_frobenius(f: &GradientFactors) -> f64 {
    let n = f.left.len();
    let mut total = 0.0;
    for x in 0..n {
        total += dot(&f.left[x], &f.left[x]) * dot(&f.right[x], &f.right[x]);
        for y in (x + 1)..n {
            total += 2.0 * dot(&f.left[x], &f.left[y]) * dot(&f.right[x], &f.right[y]);
        }
    }
    total.max(0.0).sqrt()
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "temperature must be positive and finite, got {t}"
        )))
    }
}
