mod kernel;
mod score;

pub use kernel::{
    grad_norm, gram_frobenius, infonce_loss, query_gradient, virtual_projection_factors,
    GradSurface, GradientFactors, LossConfig, LossQuery,
};
pub use score::{
    gradnormir_score, read_score_file, write_score_file, GradNormScore, ScoreRecord, Scorer,
    TOOL_VERSION,
};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::sampler::SamplerConfig;

/// Everything that influences a per-document score.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub sampler: SamplerConfig,
    pub loss: LossConfig,
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.loss.validate()
    }

    /// Short hash of the settings that change individual scores. The
    /// subsample fraction only picks which documents get scored, so it is left
    /// out and calibration at full size stays comparable with subsampled runs.
    pub fn digest(&self) -> String {
        let s = &self.sampler;
        let canonical = serde_json::json!({
            "schema": 1,
            "sampler": {
                "dropout_rate": s.dropout_rate,
                "num_positives": s.num_positives,
                "num_negatives": s.num_negatives,
                "candidate_pool_size": s.candidate_pool_size,
                "perturb_mode": s.perturb_mode,
                "masks_per_doc": s.masks_per_doc,
                "negatives": s.negatives,
            },
            "loss": self.loss,
        });
        let hash = Sha256::digest(canonical.to_string().as_bytes());
        hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
