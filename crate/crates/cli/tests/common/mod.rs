#![allow(dead_code)]

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gradnormir_core::embedding::{
    write_embedding_set, DocumentEmbedding, EmbeddingSet, EmbeddingSetHeader, Pooling,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const DIM: usize = 64;

pub fn gradnormir(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradnormir"))
        .args(args)
        .env("GRADNORMIR_LOG", "error")
        .output()
        .expect("spawn gradnormir")
}

/// Runs the binary and fails the test with its stderr on a nonzero exit.
pub fn run_ok(args: &[&str]) -> serde_json::Value {
    let out = gradnormir(args);
    assert!(
        out.status.success(),
        "gradnormir {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON object")
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes a verdict line straight to the stderr handle so it shows even
/// when the harness captures test output.
pub fn verdict(pass: bool, id: &str, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[{tag}] {id} {detail}");
}

pub fn normal(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Unit vector from `center + sigma * N(0, I)`.
pub fn near(rng: &mut ChaCha8Rng, center: &[f64], sigma: f64) -> Vec<f64> {
    let v: Vec<f64> = center
        .iter()
        .map(|c| c + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    unit(&v)
}

pub fn write_set(path: &Path, retriever: &str, docs: &[(String, Vec<f64>)]) {
    let records = docs
        .iter()
        .map(|(id, v)| DocumentEmbedding::new(id.clone(), to_f32(v)))
        .collect();
    let set = EmbeddingSet::new(
        EmbeddingSetHeader::new(retriever, DIM, Pooling::PrePooled),
        records,
    )
    .unwrap();
    write_embedding_set(&set.header, &set.records, path).unwrap();
}

/// The planted two-population fixture.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub reference: PathBuf,
    pub corpus: PathBuf,
    pub queries: PathBuf,
    pub qrels: PathBuf,
    /// doc_id -> planted OOD label.
    pub labels: Vec<(String, bool)>,
}

/// 500 reference vectors near a fixed direction (sigma 0.05), and an eval
/// corpus of 250 more from the same cluster plus 250 uniform unit vectors.
/// Each eval doc gets one relevant query. In-cluster queries are noisy copies
/// of their doc; OOD docs get queries pulled toward the cluster direction,
/// which the retriever fills with cluster documents instead.
pub fn planted_fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = unit(&normal(&mut rng, DIM));
    let reference: Vec<(String, Vec<f64>)> = (0..500)
        .map(|i| (format!("ref{i:04}"), near(&mut rng, &center, 0.05)))
        .collect();
    let mut corpus = Vec::new();
    let mut labels = Vec::new();
    for i in 0..500 {
        let ood = i >= 250;
        let v = if ood {
            unit(&normal(&mut rng, DIM))
        } else {
            near(&mut rng, &center, 0.05)
        };
        let id = format!("doc{i:04}");
        labels.push((id.clone(), ood));
        corpus.push((id, v));
    }
    let queries: Vec<(String, Vec<f64>)> = corpus
        .iter()
        .zip(&labels)
        .enumerate()
        .map(|(i, ((_, d), (_, ood)))| {
            let noise = normal(&mut rng, DIM);
            let q: Vec<f64> = if *ood {
                (0..DIM)
                    .map(|j| center[j] + 0.3 * d[j] + 0.05 * noise[j])
                    .collect()
            } else {
                (0..DIM).map(|j| d[j] + 0.05 * noise[j]).collect()
            };
            (format!("q{i:04}"), unit(&q))
        })
        .collect();

    let dir = tempfile::tempdir().unwrap();
    let reference_path = dir.path().join("reference.gne");
    let corpus_path = dir.path().join("synthetic.gne");
    let queries_path = dir.path().join("queries.gne");
    let qrels_path = dir.path().join("qrels.tsv");
    write_set(&reference_path, "synthetic-encoder", &reference);
    write_set(&corpus_path, "synthetic-encoder", &corpus);
    write_set(&queries_path, "synthetic-encoder", &queries);
    let mut tsv = String::from("query-id\tcorpus-id\tscore\n");
    for (i, (doc, _)) in labels.iter().enumerate() {
        tsv.push_str(&format!("q{i:04}\t{doc}\t1\n"));
    }
    std::fs::write(&qrels_path, tsv).unwrap();
    Fixture {
        dir,
        reference: reference_path,
        corpus: corpus_path,
        queries: queries_path,
        qrels: qrels_path,
        labels,
    }
}
