use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gradnormir_core::detector::Statistic;
use gradnormir_core::embedding::Pooling;
use gradnormir_core::gradnorm::GradSurface;
use gradnormir_core::sampler::PerturbMode;

#[derive(Debug, Parser)]
#[command(
    name = "gradnormir",
    version,
    about = "Query-free OOD corpus detection for dense retrievers"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,

    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand. They override the config file.
#[derive(Debug, Default, Args)]
pub struct CommonArgs {
    /// TOML pipeline config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[arg(long, global = true)]
    pub workers: Option<usize>,

    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,

    /// Fraction of documents to score, in (0, 1].
    #[arg(long, global = true)]
    pub subsample: Option<f64>,

    #[arg(long, global = true)]
    pub gamma: Option<f64>,

    #[arg(long, global = true, value_enum)]
    pub statistic: Option<StatisticArg>,

    #[arg(long, global = true, value_enum)]
    pub grad_surface: Option<SurfaceArg>,

    #[arg(long, global = true, value_enum)]
    pub perturb: Option<PerturbArg>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score in-domain reference documents and write the threshold.
    Calibrate(CalibrateArgs),
    /// Score every (or a subsample of) document in a corpus.
    Score(ScoreArgs),
    /// Flag documents against a calibration and decide whether the corpus is OOD.
    Detect(DetectArgs),
    /// Rank retrievers by their OOD ratio on one corpus.
    Select(SelectArgs),
    /// Retrieval metrics: DRR, Recall@K, d2q quartiles.
    Evaluate(EvaluateArgs),
    /// Replay a sequence of corpus sessions through the update policy.
    SimulateStream(StreamArgs),
    /// Fetch embeddings for a text corpus from an HTTP embedding service.
    Embed(EmbedArgs),
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Reference embedding file (binary or JSONL).
    #[arg(long)]
    pub reference: Option<PathBuf>,

    /// Number of reference documents to score.
    #[arg(long)]
    pub reference_count: Option<usize>,

    /// Defaults to the reference file stem.
    #[arg(long)]
    pub reference_corpus_id: Option<String>,

    /// Replace an existing calibration built with different settings.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,

    /// Defaults to the corpus file stem.
    #[arg(long)]
    pub corpus_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Score file from `score`. When absent, the corpus is scored first.
    #[arg(long)]
    pub scores: Option<PathBuf>,

    #[arg(long, conflicts_with = "scores")]
    pub corpus: Option<PathBuf>,

    #[arg(long)]
    pub calibration: Option<PathBuf>,

    #[arg(long)]
    pub corpus_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Corpus reports, one per retriever.
    #[arg(long = "report", required = true, num_args = 1..)]
    pub reports: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,

    /// Query embedding file.
    #[arg(long)]
    pub queries: Option<PathBuf>,

    /// BEIR qrels TSV.
    #[arg(long)]
    pub qrels: Option<PathBuf>,

    #[arg(long, default_value_t = 100)]
    pub k: usize,

    /// Score file for the quartile analysis.
    #[arg(long)]
    pub scores: Option<PathBuf>,

    /// Per-document flags from `detect`; restricts the second DRR.
    #[arg(long)]
    pub flags: Option<PathBuf>,

    /// In-distribution Recall@K to compare against.
    #[arg(long)]
    pub reference_recall: Option<f64>,

    #[arg(long)]
    pub corpus_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    /// JSONL of {"corpus_id", "ratio"} or {"corpus_id", "report"}.
    #[arg(long)]
    pub manifest: PathBuf,

    #[arg(long, value_enum, default_value_t = StreamMode::Threshold)]
    pub mode: StreamMode,

    /// Number of updates in budget mode.
    #[arg(long, required_if_eq("mode", "budget"))]
    pub budget: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    /// Service base URL; requests go to `<endpoint>/embed`.
    #[arg(long)]
    pub endpoint: String,

    /// Corpus JSONL with `_id`, `title`, `text`.
    #[arg(long)]
    pub corpus: PathBuf,

    #[arg(long)]
    pub retriever_id: String,

    #[arg(long, value_enum, default_value_t = PoolingArg::Mean)]
    pub pooling: PoolingArg,

    #[arg(long)]
    pub token_states: bool,

    #[arg(long, default_value_t = 64)]
    pub max_batch: usize,

    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StatisticArg {
    Mean,
    Median,
}

impl From<StatisticArg> for Statistic {
    fn from(s: StatisticArg) -> Self {
        match s {
            StatisticArg::Mean => Statistic::Mean,
            StatisticArg::Median => Statistic::Median,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SurfaceArg {
    VirtualProjection,
    QueryEmbedding,
}

impl From<SurfaceArg> for GradSurface {
    fn from(s: SurfaceArg) -> Self {
        match s {
            SurfaceArg::VirtualProjection => GradSurface::VirtualProjection,
            SurfaceArg::QueryEmbedding => GradSurface::QueryEmbedding,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PerturbArg {
    TokenMask,
    ElementMask,
    None,
}

impl From<PerturbArg> for PerturbMode {
    fn from(p: PerturbArg) -> Self {
        match p {
            PerturbArg::TokenMask => PerturbMode::TokenMask,
            PerturbArg::ElementMask => PerturbMode::ElementMask,
            PerturbArg::None => PerturbMode::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StreamMode {
    Threshold,
    Budget,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PoolingArg {
    Mean,
    Cls,
}

impl From<PoolingArg> for Pooling {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Mean => Pooling::Mean,
            PoolingArg::Cls => Pooling::Cls,
        }
    }
}
