use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use gradnormir_core::detector::{
    detect, schedule_updates, select_retriever, Calibration, CorpusReport, DocFlag, ScheduleMode,
    Session,
};
use gradnormir_core::embedding::{
    open_embedding_set, read_corpus_jsonl, write_embedding_set, DocumentEmbedding, EmbeddingClient,
    EmbeddingSet,
};
use gradnormir_core::eval::{
    d2q_recall, drr, quartile_means, recall_at_k, retrieval_run, robustness_gap, MetricReport,
    Qrels,
};
use gradnormir_core::gradnorm::{
    read_score_file, write_score_file, GradNormScore, Scorer, TOOL_VERSION,
};
use gradnormir_core::io::{read_json, read_jsonl, write_json, write_jsonl};
use gradnormir_core::knn::CosineIndex;
use gradnormir_core::sampler::subsample_corpus;
use gradnormir_core::seed::subsample_seed;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::args::{
    CalibrateArgs, DetectArgs, EmbedArgs, EvaluateArgs, ScoreArgs, SelectArgs, StreamArgs,
    StreamMode,
};
use crate::config::PipelineConfig;

/// Written next to each score file so later stages know what was scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRunMeta {
    pub corpus_id: String,
    pub retriever_id: String,
    pub corpus_docs: usize,
    pub scored_docs: usize,
    pub subsample_fraction: f64,
    pub config_digest: String,
    pub global_seed: u64,
    pub tool_version: String,
}

fn meta_path(scores: &Path) -> PathBuf {
    scores.with_extension("meta.json")
}

fn require(path: Option<&PathBuf>, what: &str) -> Result<PathBuf> {
    let path = path.with_context(|| format!("no {what} given (flag or [paths] entry)"))?;
    if !path.is_file() {
        bail!("{what} not found: {}", path.display());
    }
    Ok(path.clone())
}

fn stem_id(path: &Path) -> String {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("corpus");
    let name = name.strip_suffix(".scores.jsonl").unwrap_or(name);
    Path::new(name)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(name)
        .to_string()
}

fn load_set(path: &Path) -> Result<EmbeddingSet> {
    let started = Instant::now();
    let set = open_embedding_set(path)
        .with_context(|| format!("loading embeddings {}", path.display()))?;
    log::info!(
        "loaded {} embeddings (dim {}) from {} in {:.3}s",
        set.len(),
        set.header.dimension,
        path.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(set)
}

fn output_dir(cfg: &PipelineConfig) -> Result<&Path> {
    let dir = cfg.paths.output_dir.as_path();
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating output dir {}", dir.display()))?;
    Ok(dir)
}

/// Scores the chosen documents of `set`; the index always covers all of it.
fn score_selected(
    cfg: &PipelineConfig,
    set: &EmbeddingSet,
    selected: &[String],
) -> Result<Vec<GradNormScore>> {
    let started = Instant::now();
    let index = CosineIndex::build(set)?;
    let scorer = Scorer::new(&index, set.header.pooling, cfg.scoring(), cfg.global_seed)?;
    let wanted: HashSet<&str> = selected.iter().map(String::as_str).collect();
    let docs: Vec<&DocumentEmbedding> = set
        .records
        .iter()
        .filter(|d| wanted.contains(d.doc_id.as_str()))
        .collect();
    let scores = scorer.score_all(&docs, cfg.workers)?;
    let secs = started.elapsed().as_secs_f64();
    log::info!(
        "scored {} of {} documents on {} workers in {:.3}s ({:.2} ms/doc)",
        scores.len(),
        set.len(),
        cfg.workers,
        secs,
        1e3 * secs / scores.len().max(1) as f64
    );
    Ok(scores)
}

fn doc_ids(set: &EmbeddingSet) -> Vec<String> {
    set.records.iter().map(|r| r.doc_id.clone()).collect()
}

pub fn calibrate(cfg: &PipelineConfig, args: &CalibrateArgs) -> Result<Value> {
    let reference = require(
        args.reference.as_ref().or(cfg.paths.reference.as_ref()),
        "reference embeddings",
    )?;
    let out = output_dir(cfg)?;
    let calibration_path = out.join("calibration.json");
    let scoring = cfg.scoring();
    if calibration_path.exists() && !args.overwrite {
        let existing: Calibration = read_json(&calibration_path)?;
        if existing.config_digest != scoring.digest() {
            bail!(
                "{} was built with config digest {} but the current config has {}; pass --overwrite to replace it",
                calibration_path.display(),
                existing.config_digest,
                scoring.digest()
            );
        }
    }

    let set = load_set(&reference)?;
    let corpus_id = args
        .reference_corpus_id
        .clone()
        .unwrap_or_else(|| stem_id(&reference));
    let requested = args.reference_count.unwrap_or(cfg.reference_count);
    let ids = doc_ids(&set);
    let selected = if requested >= ids.len() {
        if requested > ids.len() {
            log::warn!(
                "reference set has {} documents, fewer than the requested {requested}",
                ids.len()
            );
        }
        ids
    } else {
        let fraction = requested as f64 / ids.len() as f64;
        subsample_corpus(&ids, fraction, subsample_seed(cfg.global_seed, &corpus_id))?
    };
    let scores = score_selected(cfg, &set, &selected)?;
    let calibration = Calibration::from_scores(
        &scores,
        cfg.threshold_statistic,
        &set.header.retriever_id,
        &corpus_id,
    )?;

    let scores_path = out.join("reference.scores.jsonl");
    write_score_file(&scores_path, &scores)?;
    write_json(
        &meta_path(&scores_path),
        &ScoreRunMeta {
            corpus_id: corpus_id.clone(),
            retriever_id: set.header.retriever_id.clone(),
            corpus_docs: set.len(),
            scored_docs: scores.len(),
            subsample_fraction: scores.len() as f64 / set.len() as f64,
            config_digest: calibration.config_digest.clone(),
            global_seed: cfg.global_seed,
            tool_version: TOOL_VERSION.to_string(),
        },
    )?;
    write_json(&calibration_path, &calibration)?;
    log::info!(
        "threshold {} from {} reference documents",
        calibration.threshold,
        calibration.reference_count
    );
    Ok(json!({
        "calibration": calibration_path,
        "scores": scores_path,
        "threshold": calibration.threshold,
        "reference_count": calibration.reference_count,
    }))
}

fn run_scoring(
    cfg: &PipelineConfig,
    corpus: &Path,
    corpus_id: Option<String>,
) -> Result<(PathBuf, ScoreRunMeta)> {
    let set = load_set(corpus)?;
    let corpus_id = corpus_id.unwrap_or_else(|| stem_id(corpus));
    let ids = doc_ids(&set);
    let selected = subsample_corpus(
        &ids,
        cfg.sampler.subsample_fraction,
        subsample_seed(cfg.global_seed, &corpus_id),
    )?;
    let scores = score_selected(cfg, &set, &selected)?;
    let out = output_dir(cfg)?;
    let path = out.join(format!("{corpus_id}.scores.jsonl"));
    let meta = ScoreRunMeta {
        corpus_id,
        retriever_id: set.header.retriever_id.clone(),
        corpus_docs: set.len(),
        scored_docs: scores.len(),
        subsample_fraction: cfg.sampler.subsample_fraction,
        config_digest: cfg.scoring().digest(),
        global_seed: cfg.global_seed,
        tool_version: TOOL_VERSION.to_string(),
    };
    write_score_file(&path, &scores)?;
    write_json(&meta_path(&path), &meta)?;
    Ok((path, meta))
}

pub fn score(cfg: &PipelineConfig, args: &ScoreArgs) -> Result<Value> {
    let corpus = require(
        args.corpus.as_ref().or(cfg.paths.corpus.as_ref()),
        "corpus embeddings",
    )?;
    let (path, meta) = run_scoring(cfg, &corpus, args.corpus_id.clone())?;
    Ok(json!({ "scores": path, "scored_docs": meta.scored_docs, "corpus_docs": meta.corpus_docs }))
}

pub fn detect_cmd(cfg: &PipelineConfig, args: &DetectArgs) -> Result<Value> {
    let default_calibration = cfg.paths.output_dir.join("calibration.json");
    let calibration_path = require(
        Some(
            args.calibration
                .as_ref()
                .or(cfg.paths.calibration.as_ref())
                .unwrap_or(&default_calibration),
        ),
        "calibration",
    )?;
    let explicit_scores = args.scores.as_ref().or(if args.corpus.is_some() {
        None
    } else {
        cfg.paths.scores.as_ref()
    });
    let scores_path = match explicit_scores {
        Some(p) => require(Some(p), "score file")?,
        None => {
            let corpus = require(
                args.corpus.as_ref().or(cfg.paths.corpus.as_ref()),
                "score file or corpus",
            )?;
            let calibration: Calibration = read_json(&calibration_path)?;
            if calibration.config_digest != cfg.scoring().digest() {
                bail!(
                    "calibration digest {} does not match the current config digest {}",
                    calibration.config_digest,
                    cfg.scoring().digest()
                );
            }
            run_scoring(cfg, &corpus, args.corpus_id.clone())?.0
        }
    };
    let calibration: Calibration = read_json(&calibration_path)?;
    let scores = read_score_file(&scores_path)?;
    let meta: Option<ScoreRunMeta> = {
        let p = meta_path(&scores_path);
        if p.is_file() {
            Some(read_json(&p)?)
        } else {
            None
        }
    };
    if let Some(m) = &meta {
        if m.retriever_id != calibration.retriever_id {
            bail!(
                "scores come from retriever {:?} but the calibration is for {:?}",
                m.retriever_id,
                calibration.retriever_id
            );
        }
    }
    let corpus_id = args
        .corpus_id
        .clone()
        .or_else(|| meta.as_ref().map(|m| m.corpus_id.clone()))
        .unwrap_or_else(|| stem_id(&scores_path));
    let fraction = meta.as_ref().map_or(1.0, |m| m.subsample_fraction);

    let report = detect(&corpus_id, &scores, &calibration, cfg.gamma, fraction)?;
    let out = output_dir(cfg)?;
    let report_path = out.join(format!("{corpus_id}.report.json"));
    let flags_path = out.join(format!("{corpus_id}.flags.jsonl"));
    write_jsonl(&flags_path, &report.flag_rows())?;
    write_json(&report_path, &report)?;
    log::info!(
        "{}: {} of {} documents flagged, r = {}, is_ood = {}",
        corpus_id,
        report.ood_docs,
        report.total_docs,
        report.ratio,
        report.is_ood
    );
    Ok(json!({
        "report": report_path,
        "flags": flags_path,
        "ratio": report.ratio,
        "is_ood": report.is_ood,
    }))
}

pub fn select(cfg: &PipelineConfig, args: &SelectArgs) -> Result<Value> {
    let mut reports = Vec::with_capacity(args.reports.len());
    for p in &args.reports {
        let p = require(Some(p), "report")?;
        reports.push(
            read_json::<CorpusReport>(&p)
                .with_context(|| format!("reading report {}", p.display()))?,
        );
    }
    let ranking = select_retriever(&reports)?;
    let corpus_id = reports[0].corpus_id.clone();
    let selection = json!({
        "corpus_id": corpus_id,
        "selected": ranking[0].retriever_id,
        "ranking": ranking,
        "tool_version": TOOL_VERSION,
    });
    let path = output_dir(cfg)?.join(format!("{corpus_id}.selection.json"));
    write_json(&path, &selection)?;
    Ok(json!({ "selection": path, "selected": ranking[0].retriever_id }))
}

pub fn evaluate(cfg: &PipelineConfig, args: &EvaluateArgs) -> Result<Value> {
    let corpus = require(
        args.corpus.as_ref().or(cfg.paths.corpus.as_ref()),
        "corpus embeddings",
    )?;
    let queries = require(
        args.queries.as_ref().or(cfg.paths.queries.as_ref()),
        "query embeddings",
    )?;
    let qrels_path = require(args.qrels.as_ref().or(cfg.paths.qrels.as_ref()), "qrels")?;
    let scores_path = args
        .scores
        .as_ref()
        .map(|p| require(Some(p), "score file"))
        .transpose()?;
    let flags_path = args
        .flags
        .as_ref()
        .map(|p| require(Some(p), "flags file"))
        .transpose()?;
    if let Some(r) = args.reference_recall {
        anyhow::ensure!(
            (0.0..=1.0).contains(&r),
            "reference recall {r} not in [0, 1]"
        );
    }

    let set = load_set(&corpus)?;
    let query_set = load_set(&queries)?;
    let qrels = Qrels::read_tsv(&qrels_path)?;
    let index = CosineIndex::build(&set)?;
    let query_vectors: Vec<(String, Vec<f64>)> = query_set
        .records
        .iter()
        .map(|q| (q.doc_id.clone(), q.pooled_f64()))
        .collect();
    let started = Instant::now();
    let run = retrieval_run(
        &index,
        query_vectors
            .iter()
            .map(|(id, v)| (id.as_str(), v.as_slice())),
        args.k,
    )?;
    log::info!(
        "retrieved top-{} for {} queries in {:.3}s",
        args.k,
        run.results.len(),
        started.elapsed().as_secs_f64()
    );

    let drr_all = drr(&run, &qrels, set.records.iter().map(|r| r.doc_id.as_str()))?;
    let recall = recall_at_k(&run, &qrels, args.k)?;
    if recall.skipped_queries > 0 {
        log::warn!(
            "{} queries have no relevant documents and were skipped",
            recall.skipped_queries
        );
    }

    let drr_ood_subset = match &flags_path {
        Some(p) => {
            let flags: Vec<DocFlag> = read_jsonl(p)?;
            let ood: Vec<&str> = flags
                .iter()
                .filter(|f| f.is_ood)
                .map(|f| f.doc_id.as_str())
                .collect();
            match drr(&run, &qrels, ood.iter().copied()) {
                Ok(v) => Some(v),
                Err(e) => {
                    log::warn!("no DRR for the flagged subset: {e}");
                    None
                }
            }
        }
        None => None,
    };

    let (quartiles, digest, seed) = match &scores_path {
        Some(p) => {
            let scores = read_score_file(p)?;
            let by_doc: BTreeMap<String, f64> =
                scores.iter().map(|s| (s.doc_id.clone(), s.score)).collect();
            let d2q = d2q_recall(&run, &qrels)?;
            let q = quartile_means(&by_doc, &d2q)?;
            let first = scores.first();
            (
                Some(q),
                first.map(|s| s.config_digest.clone()).unwrap_or_default(),
                first.map_or(cfg.global_seed, |s| s.rng_seed),
            )
        }
        None => (None, String::new(), cfg.global_seed),
    };

    let corpus_id = args.corpus_id.clone().unwrap_or_else(|| stem_id(&corpus));
    let report = MetricReport {
        corpus_id: corpus_id.clone(),
        retriever_id: set.header.retriever_id.clone(),
        drr_all,
        drr_ood_subset,
        recall_at_k: recall,
        k: args.k,
        quartile_means: quartiles,
        robustness_gap: args
            .reference_recall
            .map(|r| robustness_gap(r, recall.recall)),
        config_digest: digest,
        global_seed: seed,
        tool_version: TOOL_VERSION.to_string(),
    };
    let path = output_dir(cfg)?.join(format!("{corpus_id}.metrics.json"));
    write_json(&path, &report)?;
    Ok(json!({ "metrics": path, "drr_all": drr_all, "recall": recall.recall }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    corpus_id: Option<String>,
    ratio: Option<f64>,
    report: Option<PathBuf>,
}

pub fn simulate_stream(cfg: &PipelineConfig, args: &StreamArgs) -> Result<Value> {
    let manifest = require(Some(&args.manifest), "session manifest")?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let entries: Vec<ManifestEntry> = read_jsonl(&manifest)?;
    let mut sessions = Vec::with_capacity(entries.len());
    for (i, e) in entries.into_iter().enumerate() {
        let session = match (e.ratio, e.report) {
            (Some(ratio), None) => Session {
                corpus_id: e.corpus_id.unwrap_or_else(|| format!("session-{}", i + 1)),
                ratio,
            },
            (None, Some(report)) => {
                let path = if report.is_relative() {
                    base.join(report)
                } else {
                    report
                };
                let r: CorpusReport = read_json(&require(Some(&path), "session report")?)?;
                Session {
                    corpus_id: e.corpus_id.unwrap_or(r.corpus_id),
                    ratio: r.ratio,
                }
            }
            _ => bail!(
                "manifest entry {} needs exactly one of \"ratio\" or \"report\"",
                i + 1
            ),
        };
        anyhow::ensure!(
            (0.0..=1.0).contains(&session.ratio),
            "session {} ratio {} not in [0, 1]",
            i + 1,
            session.ratio
        );
        sessions.push(session);
    }
    let mode = match args.mode {
        StreamMode::Threshold => ScheduleMode::Threshold { gamma: cfg.gamma },
        StreamMode::Budget => ScheduleMode::Budget {
            n: args.budget.context("--budget is required in budget mode")?,
        },
    };
    let decisions = schedule_updates(&sessions, mode)?;
    let path = output_dir(cfg)?.join("decisions.jsonl");
    write_jsonl(&path, &decisions)?;
    Ok(json!({
        "decisions": path,
        "updates": decisions.last().map_or(0, |d| d.cumulative_updates),
        "sessions": decisions.len(),
    }))
}

pub fn embed(args: &EmbedArgs) -> Result<Value> {
    let corpus = require(Some(&args.corpus), "text corpus")?;
    let docs = read_corpus_jsonl(&corpus)?;
    let client = EmbeddingClient::new(args.endpoint.clone()).with_max_batch(args.max_batch);
    let started = Instant::now();
    let set = client.embed_corpus(
        &docs,
        &args.retriever_id,
        args.pooling.into(),
        args.token_states,
    )?;
    log::info!(
        "embedded {} documents in {:.3}s",
        set.len(),
        started.elapsed().as_secs_f64()
    );
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_embedding_set(&set.header, &set.records, &args.out)?;
    Ok(json!({ "embeddings": args.out, "records": set.len(), "dimension": set.header.dimension }))
}
