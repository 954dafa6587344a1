mod common;

use std::sync::atomic::{AtomicUsize, Ordering};

use lsim::data::{read_jsonl, write_jsonl};
use lsim::embedding::TextEncoder;
use lsim::llm::{GenerationConfig, LlmClient, MockLlm, RetryPolicy};
use lsim::pipeline::{
    answers_file, file_digest, AnswerRecord, MetricsSummary, Pipeline, RetrievalRecord, RunConfig, RunManifest, CHAINS,
    GRAPH, MANIFEST, METRICS, RETRIEVAL,
};
use lsim::LsimError;

fn encoder(c: &RunConfig) -> Box<dyn TextEncoder> {
    c.encoder.build().unwrap()
}

/// The mock llm, but every call after the first `budget` fails.
struct FailsAfter {
    budget: usize,
    calls: AtomicUsize,
}

impl LlmClient for FailsAfter {
    fn complete(&self, prompt: &str, config: &GenerationConfig) -> lsim::Result<String> {
        if self.calls.fetch_add(1, Ordering::SeqCst) >= self.budget {
            return Err(LsimError::Llm("connection reset".into()));
        }
        MockLlm.complete(prompt, config)
    }
}

#[test]
fn run_all_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut ca = common::light_config(a.path(), 100);
    let mut cb = common::light_config(b.path(), 100);
    // same relative layout so config snapshots compare equal
    ca.paths.dataset = "input.jsonl".into();
    ca.paths.run_dir = "run".into();
    cb.paths = ca.paths.clone();
    let run = |dir: &std::path::Path, c: RunConfig| {
        let cwd = std::env::current_dir().unwrap();
        let mut c = c;
        c.paths.dataset = dir.join(&c.paths.dataset);
        c.paths.run_dir = dir.join(&c.paths.run_dir);
        Pipeline::new(c).unwrap().run_all().unwrap();
        assert_eq!(std::env::current_dir().unwrap(), cwd);
    };
    run(a.path(), ca);
    run(b.path(), cb);
    let ta = common::tree(&a.path().join("run"));
    let tb = common::tree(&b.path().join("run"));
    assert_eq!(ta.iter().map(|t| &t.0).collect::<Vec<_>>(), tb.iter().map(|t| &t.0).collect::<Vec<_>>());
    for ((name, x), (_, y)) in ta.iter().zip(&tb) {
        if name != MANIFEST {
            assert!(x == y, "{name} differs between runs");
        }
    }
    let ma = RunManifest::load(&a.path().join("run")).unwrap();
    let mb = RunManifest::load(&b.path().join("run")).unwrap();
    for (stage, entry) in &ma.stages {
        assert_eq!(entry.artifacts, mb.stages[stage].artifacts, "{stage}");
    }
}

#[test]
fn manifest_records_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let c = common::light_config(dir.path(), 60);
    let p = Pipeline::new(c.clone()).unwrap();
    p.run_all().unwrap();
    let run = dir.path().join("run");
    let m = RunManifest::load(&run).unwrap();
    assert_eq!(m.config.as_ref(), Some(&c));
    assert_eq!(m.seed, c.seed);
    assert_eq!(m.version, env!("CARGO_PKG_VERSION"));
    assert_eq!(m.stages.len(), 9);
    assert!(m.stale_artifacts(&run).unwrap().is_empty());
    let recorded: std::collections::BTreeSet<&String> = m.stages.values().flat_map(|e| e.artifacts.keys()).collect();
    for (name, _) in common::tree(&run) {
        if name != MANIFEST {
            assert!(recorded.contains(&name), "{name} missing from manifest");
        }
    }
    std::fs::write(run.join(GRAPH), "tampered").unwrap();
    assert_eq!(m.stale_artifacts(&run).unwrap(), vec![GRAPH.to_string()]);
}

#[test]
fn extraction_resumes_after_interruption() {
    let full = tempfile::tempdir().unwrap();
    let c = common::light_config(full.path(), 100);
    let p = Pipeline::new(c).unwrap();
    p.ingest().unwrap();
    p.split().unwrap();
    p.build_graph().unwrap();
    p.extract_chains().unwrap();
    let expected = std::fs::read(full.path().join("run").join(CHAINS)).unwrap();

    let cut = tempfile::tempdir().unwrap();
    let mut c = common::light_config(cut.path(), 100);
    c.retry = RetryPolicy::immediate(1);
    let p = Pipeline::new(c.clone()).unwrap();
    p.ingest().unwrap();
    p.split().unwrap();
    p.build_graph().unwrap();
    let flaky = FailsAfter {
        budget: 70,
        calls: AtomicUsize::new(0),
    };
    let p = Pipeline::with_providers(c.clone(), Box::new(flaky), encoder(&c)).unwrap();
    let err = p.extract_chains().unwrap_err();
    assert!(err.to_string().contains("connection reset"), "{err}");
    let chains = cut.path().join("run").join(CHAINS);
    let partial = std::fs::read(&chains).unwrap();
    assert!(!partial.is_empty() && partial.len() < expected.len());
    assert!(expected.starts_with(&partial));

    // a torn write leaves half a record behind
    let mut torn = partial.clone();
    torn.extend_from_slice(b"{\"id\":\"q000");
    std::fs::write(&chains, torn).unwrap();

    let p = Pipeline::new(c).unwrap();
    let report = p.extract_chains().unwrap();
    assert!(report.summary.contains("resumed"), "{}", report.summary);
    assert_eq!(std::fs::read(&chains).unwrap(), expected);
}

/// Graph and chains from the 100-pair fixture with the mock llm, pinned after
/// a reviewed run.
#[test]
fn golden_graph_and_chain_digests() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(common::light_config(dir.path(), 100)).unwrap();
    p.ingest().unwrap();
    p.split().unwrap();
    p.build_graph().unwrap();
    p.extract_chains().unwrap();
    let run = dir.path().join("run");
    let graph = file_digest(&run.join(GRAPH)).unwrap();
    let chains = file_digest(&run.join(CHAINS)).unwrap();
    assert_eq!(graph, GOLDEN_GRAPH, "graph digest");
    assert_eq!(chains, GOLDEN_CHAINS, "chains digest");
}

const GOLDEN_GRAPH: &str = "e79b6f3a16f7af4f5042eb4be7a99215c1fae603ff6ff4aba6e8be8098e3067f";
const GOLDEN_CHAINS: &str = "9e7cd28dc6759b43febd8538597271576da2400455be66b89c82fa0c762aa383";

#[test]
fn evaluating_references_scores_100() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = common::light_config(dir.path(), 40);
    c.repeats = 1;
    let p = Pipeline::new(c).unwrap();
    p.ingest().unwrap();
    p.split().unwrap();
    let test = p.load_splits().unwrap().test;
    let answers: Vec<AnswerRecord> = test
        .iter()
        .map(|q| AnswerRecord {
            id: q.id.clone(),
            answer: q.answer_text.clone(),
        })
        .collect();
    let run = dir.path().join("run");
    std::fs::create_dir_all(run.join("answers")).unwrap();
    write_jsonl(run.join(answers_file(0)), &answers).unwrap();
    p.evaluate().unwrap();
    let m: MetricsSummary = serde_json::from_str(&std::fs::read_to_string(run.join(METRICS)).unwrap()).unwrap();
    assert_eq!(m.examples, test.len());
    assert!((m.mean.rouge1_f - 100.0).abs() < 1e-9, "{}", m.mean.rouge1_f);
    assert!((m.mean.rouge_l_f - 100.0).abs() < 1e-9);
    assert!((m.mean.bertscore_proxy - 100.0).abs() < 1e-6);
}

#[test]
fn retrieval_returns_k_ranked_database_ids() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(common::light_config(dir.path(), 80)).unwrap();
    p.run_all().unwrap();
    let splits = p.load_splits().unwrap();
    let db: std::collections::HashSet<&str> = splits.database.iter().map(|q| q.id.as_str()).collect();
    let records: Vec<RetrievalRecord> = read_jsonl(dir.path().join("run").join(RETRIEVAL)).unwrap();
    assert_eq!(records.len(), splits.test.len());
    for r in records {
        assert_eq!(r.results.len(), 3);
        assert_eq!(r.results.iter().map(|x| x.rank).collect::<Vec<_>>(), [1, 2, 3]);
        assert!(r.results.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(r.results.iter().all(|x| db.contains(x.candidate_id.as_str())));
    }
}

#[test]
fn stages_name_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(common::light_config(dir.path(), 20)).unwrap();
    match p.build_graph() {
        Err(LsimError::MissingArtifact(path)) => assert!(path.ends_with("splits/database.jsonl")),
        other => panic!("{other:?}"),
    }
    match p.split() {
        Err(LsimError::MissingArtifact(path)) => assert!(path.ends_with("dataset.jsonl")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn sample_config_matches_defaults() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/run.toml");
    assert_eq!(RunConfig::load(path).unwrap(), RunConfig::default());
}
