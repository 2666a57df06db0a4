use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gradnormir_core::detector::{Statistic, DEFAULT_GAMMA};
use gradnormir_core::gradnorm::{LossConfig, ScoringConfig};
use gradnormir_core::sampler::SamplerConfig;
use serde::{Deserialize, Serialize};

use crate::args::CommonArgs;

pub const DEFAULT_REFERENCE_COUNT: usize = 3000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub global_seed: u64,
    pub workers: usize,
    pub gamma: f64,
    pub threshold_statistic: Statistic,
    pub reference_count: usize,
    pub sampler: SamplerConfig,
    pub loss: LossConfig,
    pub paths: Paths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: None,
            reference: None,
            queries: None,
            qrels: None,
            calibration: None,
            scores: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            global_seed: 0,
            workers: 1,
            gamma: DEFAULT_GAMMA,
            threshold_statistic: Statistic::Mean,
            reference_count: DEFAULT_REFERENCE_COUNT,
            sampler: SamplerConfig::default(),
            loss: LossConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl PipelineConfig {
    /// Loads the config file (if any), resolves its relative paths against
    /// the file's directory, then applies flag overrides.
    pub fn load(common: &CommonArgs) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                let mut cfg: PipelineConfig = toml::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?;
                cfg.paths.resolve(path.parent().unwrap_or(Path::new(".")));
                cfg
            }
            None => PipelineConfig::default(),
        };
        cfg.apply(common);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, c: &CommonArgs) {
        if let Some(v) = c.seed {
            self.global_seed = v;
        }
        if let Some(v) = c.workers {
            self.workers = v;
        }
        if let Some(v) = &c.output_dir {
            self.paths.output_dir = v.clone();
        }
        if let Some(v) = c.subsample {
            self.sampler.subsample_fraction = v;
        }
        if let Some(v) = c.gamma {
            self.gamma = v;
        }
        if let Some(v) = c.statistic {
            self.threshold_statistic = v.into();
        }
        if let Some(v) = c.grad_surface {
            self.loss.grad_surface = v.into();
        }
        if let Some(v) = c.perturb {
            self.sampler.perturb_mode = v.into();
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scoring().validate()?;
        anyhow::ensure!(self.workers >= 1, "workers must be at least 1");
        anyhow::ensure!(
            (0.0..=1.0).contains(&self.gamma),
            "gamma {} not in [0, 1]",
            self.gamma
        );
        anyhow::ensure!(
            self.reference_count >= 1,
            "reference_count must be at least 1"
        );
        Ok(())
    }

    pub fn scoring(&self) -> ScoringConfig {
        ScoringConfig {
            sampler: self.sampler.clone(),
            loss: self.loss.clone(),
        }
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.corpus,
            &mut self.reference,
            &mut self.queries,
            &mut self.qrels,
            &mut self.calibration,
            &mut self.scores,
        ]
        .into_iter()
        .flatten()
        {
            join(p);
        }
        join(&mut self.output_dir);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::args::{PerturbArg, StatisticArg};

    #[test]
    fn file_values_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "global_seed = 7\ngamma = 0.4\n[sampler]\nnum_positives = 4\n[loss]\ntemperature = 0.01\n[paths]\ncorpus = \"c.gne\"\n",
        )
        .unwrap();
        let common = CommonArgs {
            config: Some(path),
            gamma: Some(0.6),
            statistic: Some(StatisticArg::Median),
            perturb: Some(PerturbArg::ElementMask),
            ..CommonArgs::default()
        };
        let cfg = PipelineConfig::load(&common).unwrap();
        assert_eq!(cfg.global_seed, 7);
        assert_eq!(cfg.gamma, 0.6);
        assert_eq!(cfg.threshold_statistic, Statistic::Median);
        assert_eq!(cfg.sampler.num_positives, 4);
        assert_eq!(cfg.loss.temperature, 0.01);
        assert_eq!(cfg.paths.corpus.unwrap(), dir.path().join("c.gne"));
        assert_eq!(cfg.paths.output_dir, dir.path().join("out"));
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "gamma = 0.5\nwhatever = 1\n").unwrap();
        let common = CommonArgs {
            config: Some(path),
            ..CommonArgs::default()
        };
        assert!(PipelineConfig::load(&common).is_err());
        let common = CommonArgs {
            gamma: Some(2.0),
            ..CommonArgs::default()
        };
        assert!(PipelineConfig::load(&common).is_err());
    }
}
