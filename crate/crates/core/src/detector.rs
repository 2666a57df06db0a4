//! Thresholding, corpus verdicts, retriever ranking and update scheduling.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradnorm::{GradNormScore, TOOL_VERSION};

pub const DEFAULT_GAMMA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Statistic {
    #[default]
    Mean,
    /// Lower median for even counts.
    Median,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub retriever_id: String,
    pub statistic: Statistic,
    pub threshold: f64,
    pub reference_count: usize,
    pub reference_corpus_id: String,
    pub config_digest: String,
    pub global_seed: u64,
    pub tool_version: String,
}

pub fn calibrate_threshold(scores: &[f64], statistic: Statistic) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("reference scores"));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("reference score {bad}")));
    }
    Ok(match statistic {
        Statistic::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
        Statistic::Median => {
            let mut sorted = scores.to_vec();
            sorted.sort_by(f64::total_cmp);
            sorted[(sorted.len() - 1) / 2]
        }
    })
}

impl Calibration {
    /// Builds a calibration from scored reference documents, which must share
    /// one config digest.
    pub fn from_scores(
        scores: &[GradNormScore],
        statistic: Statistic,
        retriever_id: &str,
        reference_corpus_id: &str,
    ) -> Result<Self> {
        let first = scores
            .first()
            .ok_or(Error::EmptyInput("reference scores"))?;
        if let Some(other) = scores
            .iter()
            .find(|s| s.config_digest != first.config_digest)
        {
            return Err(Error::DigestMismatch {
                calibration: first.config_digest.clone(),
                scores: other.config_digest.clone(),
            });
        }
        let values: Vec<f64> = scores.iter().map(|s| s.score).collect();
        Ok(Self {
            retriever_id: retriever_id.to_string(),
            statistic,
            threshold: calibrate_threshold(&values, statistic)?,
            reference_count: scores.len(),
            reference_corpus_id: reference_corpus_id.to_string(),
            config_digest: first.config_digest.clone(),
            global_seed: first.rng_seed,
            tool_version: TOOL_VERSION.to_string(),
        })
    }
}

/// `score > threshold` per document. With `expected`, every listed doc must
/// have a score.
pub fn classify_documents(
    scores: &[GradNormScore],
    calibration: &Calibration,
    expected: Option<&[String]>,
) -> Result<BTreeMap<String, bool>> {
    let mut flags = BTreeMap::new();
    for s in scores {
        if s.config_digest != calibration.config_digest {
            return Err(Error::DigestMismatch {
                calibration: calibration.config_digest.clone(),
                scores: s.config_digest.clone(),
            });
        }
        if flags
            .insert(s.doc_id.clone(), s.score > calibration.threshold)
            .is_some()
        {
            return Err(Error::DuplicateDocId(s.doc_id.clone()));
        }
    }
    if let Some(ids) = expected {
        if let Some(missing) = ids.iter().find(|id| !flags.contains_key(*id)) {
            return Err(Error::MissingScore(missing.clone()));
        }
    }
    Ok(flags)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub corpus_id: String,
    pub retriever_id: String,
    pub total_docs: usize,
    pub ood_docs: usize,
    pub ratio: f64,
    pub gamma: f64,
    pub is_ood: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub statistic: Option<Statistic>,
    /// Fraction of the corpus that was scored; `total_docs` counts scored docs.
    #[serde(default = "one")]
    pub subsample_fraction: f64,
    #[serde(default)]
    pub config_digest: String,
    #[serde(default)]
    pub global_seed: u64,
    #[serde(default)]
    pub tool_version: String,
    /// Written to a separate JSONL file.
    #[serde(skip)]
    pub per_doc_flags: BTreeMap<String, bool>,
}

fn one() -> f64 {
    1.0
}

/// One line of the per-document sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocFlag {
    pub doc_id: String,
    pub is_ood: bool,
}

impl CorpusReport {
    pub fn flag_rows(&self) -> Vec<DocFlag> {
        self.per_doc_flags
            .iter()
            .map(|(doc_id, &is_ood)| DocFlag {
                doc_id: doc_id.clone(),
                is_ood,
            })
            .collect()
    }
}

pub fn corpus_report(
    corpus_id: &str,
    retriever_id: &str,
    flags: BTreeMap<String, bool>,
    gamma: f64,
) -> Result<CorpusReport> {
    if flags.is_empty() {
        return Err(Error::EmptyInput("corpus"));
    }
    check_gamma(gamma)?;
    let total = flags.len();
    let ood = flags.values().filter(|&&f| f).count();
    let ratio = ood as f64 / total as f64;
    Ok(CorpusReport {
        corpus_id: corpus_id.to_string(),
        retriever_id: retriever_id.to_string(),
        total_docs: total,
        ood_docs: ood,
        ratio,
        gamma,
        is_ood: ratio > gamma,
        mean_score: None,
        threshold: None,
        statistic: None,
        subsample_fraction: 1.0,
        config_digest: String::new(),
        global_seed: 0,
        tool_version: TOOL_VERSION.to_string(),
        per_doc_flags: flags,
    })
}

/// Classifies `scores` against `calibration` and summarizes the corpus.
pub fn detect(
    corpus_id: &str,
    scores: &[GradNormScore],
    calibration: &Calibration,
    gamma: f64,
    subsample_fraction: f64,
) -> Result<CorpusReport> {
    let flags = classify_documents(scores, calibration, None)?;
    let mut report = corpus_report(corpus_id, &calibration.retriever_id, flags, gamma)?;
    report.mean_score = Some(scores.iter().map(|s| s.score).sum::<f64>() / scores.len() as f64);
    report.threshold = Some(calibration.threshold);
    report.statistic = Some(calibration.statistic);
    report.subsample_fraction = subsample_fraction;
    report.config_digest = calibration.config_digest.clone();
    report.global_seed = calibration.global_seed;
    Ok(report)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if (0.0..=1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("gamma {gamma} not in [0, 1]")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedRetriever {
    pub rank: usize,
    pub retriever_id: String,
    pub ratio: f64,
    pub mean_score: Option<f64>,
}

/// Orders retrievers by ratio, then mean score (missing last), then id.
/// The first entry is the selection.
pub fn select_retriever(reports: &[CorpusReport]) -> Result<Vec<RankedRetriever>> {
    let first = reports.first().ok_or(Error::EmptyInput("reports"))?;
    let mut seen = HashSet::new();
    for r in reports {
        if r.corpus_id != first.corpus_id {
            return Err(Error::MixedCorpora(
                first.corpus_id.clone(),
                r.corpus_id.clone(),
            ));
        }
        if !seen.insert(r.retriever_id.as_str()) {
            return Err(Error::DuplicateRetriever(r.retriever_id.clone()));
        }
    }
    let mut order: Vec<&CorpusReport> = reports.iter().collect();
    order.sort_by(|a, b| {
        a.ratio
            .total_cmp(&b.ratio)
            .then_with(|| match (a.mean_score, b.mean_score) {
                (Some(x), Some(y)) => x.total_cmp(&y),
                (Some(_), None) => Ordering::Less,
                (None, Some(_)) => Ordering::Greater,
                (None, None) => Ordering::Equal,
            })
            .then_with(|| a.retriever_id.cmp(&b.retriever_id))
    });
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(i, r)| RankedRetriever {
            rank: i + 1,
            retriever_id: r.retriever_id.clone(),
            ratio: r.ratio,
            mean_score: r.mean_score,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    Update,
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionDecision {
    pub session_index: usize,
    pub corpus_id: String,
    pub ratio: f64,
    pub decision: Decision,
    pub cumulative_updates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub corpus_id: String,
    pub ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleMode {
    /// Update whenever `r > gamma`, deciding each session as it arrives.
    Threshold { gamma: f64 },
    /// Update the `n` sessions with the highest ratio, earlier first on ties.
    Budget { n: usize },
}

/// Streaming form of threshold-mode scheduling.
#[derive(Debug, Clone)]
pub struct OnlineScheduler {
    gamma: f64,
    seen: usize,
    updates: usize,
}

impl OnlineScheduler {
    pub fn new(gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        Ok(Self {
            gamma,
            seen: 0,
            updates: 0,
        })
    }

    pub fn observe(&mut self, session: &Session) -> SessionDecision {
        self.seen += 1;
        let decision = if session.ratio > self.gamma {
            self.updates += 1;
            Decision::Update
        } else {
            Decision::Skip
        };
        SessionDecision {
            session_index: self.seen,
            corpus_id: session.corpus_id.clone(),
            ratio: session.ratio,
            decision,
            cumulative_updates: self.updates,
        }
    }
}

pub fn schedule_updates(sessions: &[Session], mode: ScheduleMode) -> Result<Vec<SessionDecision>> {
    match mode {
        ScheduleMode::Threshold { gamma } => {
            let mut online = OnlineScheduler::new(gamma)?;
            Ok(sessions.iter().map(|s| online.observe(s)).collect())
        }
        ScheduleMode::Budget { n } => {
            if n > sessions.len() {
                return Err(Error::BudgetExceedsSessions {
                    budget: n,
                    sessions: sessions.len(),
                });
            }
            let mut order: Vec<usize> = (0..sessions.len()).collect();
            order.sort_by(|&a, &b| {
                sessions[b]
                    .ratio
                    .total_cmp(&sessions[a].ratio)
                    .then(a.cmp(&b))
            });
            let chosen: HashSet<usize> = order.into_iter().take(n).collect();
            let mut updates = 0;
            Ok(sessions
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let decision = if chosen.contains(&i) {
                        updates += 1;
                        Decision::Update
                    } else {
                        Decision::Skip
                    };
                    SessionDecision {
                        session_index: i + 1,
                        corpus_id: s.corpus_id.clone(),
                        ratio: s.ratio,
                        decision,
                        cumulative_updates: updates,
                    }
                })
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn score(id: &str, s: f64, digest: &str) -> GradNormScore {
        GradNormScore {
            doc_id: id.into(),
            score: s,
            per_positive_norms: vec![s],
            rng_seed: 1,
            config_digest: digest.into(),
        }
    }

    fn calib(threshold: f64) -> Calibration {
        Calibration {
            retriever_id: "r".into(),
            statistic: Statistic::Mean,
            threshold,
            reference_count: 1,
            reference_corpus_id: "ref".into(),
            config_digest: "abc".into(),
            global_seed: 1,
            tool_version: TOOL_VERSION.into(),
        }
    }

    fn flags(n_true: usize, n: usize) -> BTreeMap<String, bool> {
        (0..n).map(|i| (format!("d{i}"), i < n_true)).collect()
    }

    #[test]
    fn statistics() {
        assert_eq!(
            calibrate_threshold(&[1.0, 2.0, 3.0], Statistic::Mean).unwrap(),
            2.0
        );
        assert_eq!(
            calibrate_threshold(&[3.0, 1.0, 2.0], Statistic::Median).unwrap(),
            2.0
        );
        assert_eq!(
            calibrate_threshold(&[1.0, 2.0, 3.0, 10.0], Statistic::Median).unwrap(),
            2.0
        );
        assert!(matches!(
            calibrate_threshold(&[], Statistic::Mean),
            Err(Error::EmptyInput(_))
        ));
        assert!(calibrate_threshold(&[1.0, f64::NAN], Statistic::Mean).is_err());
    }

    #[test]
    fn calibration_rejects_mixed_digests() {
        let s = [score("a", 1.0, "x"), score("b", 2.0, "y")];
        assert!(matches!(
            Calibration::from_scores(&s, Statistic::Mean, "r", "ref"),
            Err(Error::DigestMismatch { .. })
        ));
        let c = Calibration::from_scores(&s[..1], Statistic::Mean, "r", "ref").unwrap();
        assert_eq!(c.reference_count, 1);
        assert_eq!(c.config_digest, "x");
    }

    #[test]
    fn classification_is_strict_and_checks_digest() {
        let c = calib(1.0);
        let f = classify_documents(&[score("a", 1.0, "abc"), score("b", 1.5, "abc")], &c, None)
            .unwrap();
        assert!(!f["a"]);
        assert!(f["b"]);
        assert!(classify_documents(&[score("a", 0.1, "abc")], &c, None)
            .unwrap()
            .values()
            .all(|v| !v));
        assert!(matches!(
            classify_documents(&[score("a", 1.0, "zzz")], &c, None),
            Err(Error::DigestMismatch { .. })
        ));
        let expected = vec!["a".to_string(), "q".to_string()];
        assert!(matches!(
            classify_documents(&[score("a", 1.0, "abc")], &c, Some(&expected)),
            Err(Error::MissingScore(id)) if id == "q"
        ));
    }

    #[test]
    fn report_boundaries() {
        let r = corpus_report("c", "r", flags(5, 10), 0.5).unwrap();
        assert_eq!(r.ratio, 0.5);
        assert!(!r.is_ood);
        assert!(corpus_report("c", "r", flags(6, 10), 0.5).unwrap().is_ood);
        for g in [0.0, 0.3, 1.0] {
            let r = corpus_report("c", "r", flags(0, 7), g).unwrap();
            assert_eq!(r.ratio, 0.0);
            assert!(!r.is_ood);
        }
        assert!(corpus_report("c", "r", BTreeMap::new(), 0.5).is_err());
        assert!(corpus_report("c", "r", flags(1, 2), 1.5).is_err());
    }

    fn report(retriever: &str, ratio: f64, mean: f64) -> CorpusReport {
        let mut r = corpus_report("c", retriever, flags(1, 2), 0.5).unwrap();
        r.ratio = ratio;
        r.mean_score = Some(mean);
        r
    }

    #[test]
    fn selection_tie_breaks() {
        let ranked = select_retriever(&[report("A", 0.2, 5.0), report("B", 0.6, 1.0)]).unwrap();
        assert_eq!(ranked[0].retriever_id, "A");
        let ranked = select_retriever(&[report("A", 0.3, 1.1), report("B", 0.3, 0.9)]).unwrap();
        assert_eq!(ranked[0].retriever_id, "B");
        let ranked = select_retriever(&[report("B", 0.3, 1.0), report("A", 0.3, 1.0)]).unwrap();
        assert_eq!(ranked[0].retriever_id, "A");
        assert_eq!(ranked[1].rank, 2);
    }

    #[test]
    fn selection_errors() {
        let mut other = report("B", 0.1, 1.0);
        other.corpus_id = "d".into();
        assert!(matches!(
            select_retriever(&[report("A", 0.2, 1.0), other]),
            Err(Error::MixedCorpora(..))
        ));
        assert!(matches!(
            select_retriever(&[report("A", 0.2, 1.0), report("A", 0.1, 1.0)]),
            Err(Error::DuplicateRetriever(_))
        ));
        assert!(select_retriever(&[]).is_err());
    }

    fn sessions(ratios: &[f64]) -> Vec<Session> {
        ratios
            .iter()
            .enumerate()
            .map(|(i, &ratio)| Session {
                corpus_id: format!("c{i}"),
                ratio,
            })
            .collect()
    }

    fn decisions(d: &[SessionDecision]) -> Vec<Decision> {
        d.iter().map(|x| x.decision).collect()
    }

    #[test]
    fn schedule_examples() {
        use Decision::*;
        let s = sessions(&[0.1, 0.7, 0.4]);
        let t = schedule_updates(&s, ScheduleMode::Threshold { gamma: 0.5 }).unwrap();
        assert_eq!(decisions(&t), vec![Skip, Update, Skip]);
        assert_eq!(t[2].cumulative_updates, 1);
        assert_eq!(t[0].session_index, 1);
        let b = schedule_updates(&s, ScheduleMode::Budget { n: 2 }).unwrap();
        assert_eq!(decisions(&b), vec![Skip, Update, Update]);
        assert!(matches!(
            schedule_updates(&s, ScheduleMode::Budget { n: 4 }),
            Err(Error::BudgetExceedsSessions { .. })
        ));
        let ties =
            schedule_updates(&sessions(&[0.5, 0.5, 0.5]), ScheduleMode::Budget { n: 1 }).unwrap();
        assert_eq!(decisions(&ties), vec![Update, Skip, Skip]);
    }

    proptest! {
        #[test]
        fn raising_threshold_never_adds_flags(
            values in prop::collection::vec(0.0f64..10.0, 1..50),
            t1 in 0.0f64..10.0,
            dt in 0.0f64..5.0,
        ) {
            let scores: Vec<GradNormScore> =
                values.iter().enumerate().map(|(i, &v)| score(&format!("d{i}"), v, "abc")).collect();
            let low = classify_documents(&scores, &calib(t1), None).unwrap();
            let high = classify_documents(&scores, &calib(t1 + dt), None).unwrap();
            for (id, &f) in &high {
                prop_assert!(!f || low[id]);
            }
        }

        #[test]
        fn ratio_is_order_invariant(bits in prop::collection::vec(any::<bool>(), 1..60), rot in 0usize..60) {
            let mut ids: Vec<(String, bool)> =
                bits.iter().enumerate().map(|(i, &b)| (format!("x{i:02}"), b)).collect();
            let a = corpus_report("c", "r", ids.iter().cloned().collect(), 0.5).unwrap();
            let k = rot % ids.len();
            ids.rotate_left(k);
            let renamed: BTreeMap<String, bool> =
                ids.iter().enumerate().map(|(i, (_, b))| (format!("y{i:02}"), *b)).collect();
            let b = corpus_report("c", "r", renamed, 0.5).unwrap();
            prop_assert_eq!(a.ratio, b.ratio);
            prop_assert_eq!(a.ratio, a.ood_docs as f64 / a.total_docs as f64);
        }

        #[test]
        fn argmin_stable_under_worse_additions(
            ratios in prop::collection::vec(0.0f64..0.5, 1..6),
            extra in prop::collection::vec(0.0f64..0.5, 1..6),
        ) {
            let reports: Vec<CorpusReport> =
                ratios.iter().enumerate().map(|(i, &r)| report(&format!("a{i}"), r, 1.0)).collect();
            let chosen = select_retriever(&reports).unwrap()[0].retriever_id.clone();
            let max = ratios.iter().cloned().fold(f64::MIN, f64::max);
            let mut more = reports.clone();
            more.extend(extra.iter().enumerate().map(|(i, &e)| report(&format!("b{i}"), max + 0.01 + e, 0.0)));
            prop_assert_eq!(&select_retriever(&more).unwrap()[0].retriever_id, &chosen);
        }

        #[test]
        fn threshold_mode_is_online(ratios in prop::collection::vec(0.0f64..1.0, 1..20), cut in 0usize..20) {
            let s = sessions(&ratios);
            let full = schedule_updates(&s, ScheduleMode::Threshold { gamma: 0.5 }).unwrap();
            let k = cut.min(s.len());
            let prefix = schedule_updates(&s[..k], ScheduleMode::Threshold { gamma: 0.5 }).unwrap();
            prop_assert_eq!(&full[..k], &prefix[..]);
            prop_assert!(full.windows(2).all(|w| w[0].cumulative_updates <= w[1].cumulative_updates));
        }

        #[test]
        fn budget_mode_matches_sort_oracle(ratios in prop::collection::vec(0u8..10, 1..20), n in 0usize..20) {
            let ratios: Vec<f64> = ratios.iter().map(|&r| f64::from(r) / 10.0).collect();
            let s = sessions(&ratios);
            let n = n.min(s.len());
            let out = schedule_updates(&s, ScheduleMode::Budget { n }).unwrap();
            let mut oracle: Vec<(f64, usize)> = ratios.iter().enumerate().map(|(i, &r)| (r, i)).collect();
            oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let expect: HashSet<usize> = oracle.iter().take(n).map(|&(_, i)| i).collect();
            let got: HashSet<usize> =
                out.iter().filter(|d| d.decision == Decision::Update).map(|d| d.session_index - 1).collect();
            prop_assert_eq!(got, expect);
            prop_assert_eq!(out.last().unwrap().cumulative_updates, n);
        }
    }
}
