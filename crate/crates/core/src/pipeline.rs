//! Stage orchestration over a run directory.
//!
//! Every stage reads its inputs from and writes its outputs to
//! `paths.run_dir`, then records the files it wrote (with sha256 digests) in
//! `manifest.json`. Stages can be rerun independently; identical config and
//! seeds give identical artifacts.
//!
//! ```text
//! run_dir/
//!   dataset.jsonl  splits/{database,train,test}.jsonl
//!   graph.jsonl  chains.jsonl
//!   policy.ckpt  policy_log.jsonl  predicted_chains.jsonl
//!   judgments.jsonl  triplets.jsonl  dssm.ckpt  dssm_log.jsonl
//!   retrieval.jsonl  answers/  metrics.json  metrics_table.txt
//!   ablation/<mode>/...  ablation_table.txt
//!   manifest.json
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_dataset, read_jsonl, split_dataset, write_dataset, write_jsonl, DataSplits, QaPair};
use crate::dssm::{
    annotate_relevance, build_triplets, candidate_pool, retrieve_topk, train_dssm, Ablation, DssmConfig, DssmModel,
    FeatureVector, RelevanceJudgment, RelevanceSettings, RetrievalResult, TripletExample, DEFAULT_RELEVANCE_TEMPLATE,
};
use crate::embedding::{EmbeddingVector, EncoderConfig, TextEncoder};
use crate::error::{LsimError, Result};
use crate::fact_rule::{
    build_graph, extract_chain, ChainOwner, ExtractionSettings, FactRuleChain, FactRuleGraph, LabelIndex,
    DEFAULT_CHAIN_TEMPLATE, DEFAULT_GRAPH_TEMPLATE,
};
use crate::generation::{assemble_context, check_template, generate_answer, AnswerRequest, DEFAULT_ANSWER_TEMPLATE};
use crate::llm::{GenerationConfig, LlmClient, MockLlm, RemoteLlm, RetryPolicy, RunLog};
use crate::metrics::{evaluate_run, format_table, MetricsReport};
use crate::policy::{predict_chain, train_policy, PolicyConfig, PolicyContext};

pub const DATASET: &str = "dataset.jsonl";
pub const SPLIT_DATABASE: &str = "splits/database.jsonl";
pub const SPLIT_TRAIN: &str = "splits/train.jsonl";
pub const SPLIT_TEST: &str = "splits/test.jsonl";
pub const GRAPH: &str = "graph.jsonl";
pub const GRAPH_WARNINGS: &str = "graph_warnings.txt";
pub const CHAINS: &str = "chains.jsonl";
pub const POLICY_CHECKPOINT: &str = "policy.ckpt";
pub const POLICY_LOG: &str = "policy_log.jsonl";
pub const PREDICTED_CHAINS: &str = "predicted_chains.jsonl";
pub const JUDGMENTS: &str = "judgments.jsonl";
pub const JUDGMENT_FAILURES: &str = "judgment_failures.txt";
pub const TRIPLETS: &str = "triplets.jsonl";
pub const DSSM_CHECKPOINT: &str = "dssm.ckpt";
pub const DSSM_LOG: &str = "dssm_log.jsonl";
pub const RETRIEVAL: &str = "retrieval.jsonl";
pub const METRICS: &str = "metrics.json";
pub const METRICS_TABLE: &str = "metrics_table.txt";
pub const ABLATION_TABLE: &str = "ablation_table.txt";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlmProvider {
    #[default]
    Mock,
    /// Reached through `LLM_ENDPOINT` / `LLM_API_KEY`.
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub run_dir: PathBuf,
    pub graph_template: Option<PathBuf>,
    pub chain_template: Option<PathBuf>,
    pub relevance_template: Option<PathBuf>,
    pub answer_template: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data/dataset.jsonl"),
            run_dir: PathBuf::from("runs/default"),
            graph_template: None,
            chain_template: None,
            relevance_template: None,
            answer_template: None,
        }
    }
}

/// Everything a run needs, loaded from one TOML file. Missing keys take the
/// defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Seeds the split and, offset by the repeat index, answer generation.
    pub seed: u64,
    pub k: usize,
    /// Generation repeats averaged by `evaluate`.
    pub repeats: usize,
    pub ablation: Ablation,
    /// Prompt with the predicted chain (true) or the extracted question chain.
    pub use_predicted_chain: bool,
    pub llm: LlmProvider,
    pub paths: PathsConfig,
    pub encoder: EncoderConfig,
    pub generation: GenerationConfig,
    pub retry: RetryPolicy,
    pub policy: PolicyConfig,
    pub dssm: DssmConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            k: 3,
            repeats: 3,
            ablation: Ablation::None,
            use_predicted_chain: true,
            llm: LlmProvider::Mock,
            paths: PathsConfig::default(),
            encoder: EncoderConfig::default(),
            generation: GenerationConfig::default(),
            retry: RetryPolicy::default(),
            policy: PolicyConfig::default(),
            dssm: DssmConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| LsimError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(LsimError::MissingFile(path.to_path_buf()));
        }
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(LsimError::Config("k must be at least 1".into()));
        }
        if self.repeats == 0 {
            return Err(LsimError::Config("repeats must be at least 1".into()));
        }
        self.encoder.validate()?;
        self.generation.validate()?;
        self.policy.validate()?;
        self.dssm.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Run-dir-relative path -> sha256 hex digest.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub config: Option<RunConfig>,
    pub stages: BTreeMap<String, StageEntry>,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST);
        if !path.exists() {
            return Ok(Self::default());
        }
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Artifacts whose current digest differs from the recorded one.
    pub fn stale_artifacts(&self, run_dir: &Path) -> Result<Vec<String>> {
        let mut stale = Vec::new();
        for entry in self.stages.values() {
            for (rel, digest) in &entry.artifacts {
                let path = run_dir.join(rel);
                if !path.exists() || file_digest(&path)? != *digest {
                    stale.push(rel.clone());
                }
            }
        }
        Ok(stale)
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Database,
    Train,
    Test,
}

/// Extracted chains for one pair. Only training pairs need an answer chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub id: String,
    pub split: SplitName,
    pub question_chain: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_chain: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedRecord {
    pub id: String,
    pub node_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub query_id: String,
    pub results: Vec<RetrievalResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub id: String,
    pub answer: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub meteor: f64,
    pub rouge1_f: f64,
    pub rouge2_f: f64,
    #[serde(rename = "rougeL_f")]
    pub rouge_l_f: f64,
    pub bertscore_proxy: f64,
}

impl Aggregates {
    fn of(report: &MetricsReport) -> Self {
        Self {
            meteor: report.meteor,
            rouge1_f: report.rouge1_f,
            rouge2_f: report.rouge2_f,
            rouge_l_f: report.rouge_l_f,
            bertscore_proxy: report.bertscore_proxy,
        }
    }

    fn report(&self) -> MetricsReport {
        MetricsReport {
            meteor: self.meteor,
            rouge1_f: self.rouge1_f,
            rouge2_f: self.rouge2_f,
            rouge_l_f: self.rouge_l_f,
            bertscore_proxy: self.bertscore_proxy,
            per_example: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub examples: usize,
    pub repeats: usize,
    pub mean: Aggregates,
    pub per_repeat: Vec<Aggregates>,
}

#[derive(Debug, Clone)]
pub struct StageReport {
    pub stage: &'static str,
    pub artifacts: Vec<PathBuf>,
    pub summary: String,
}

struct Templates {
    graph: String,
    chain: String,
    relevance: String,
    answer: String,
}

fn read_template(path: &Option<PathBuf>, default: &str) -> Result<String> {
    match path {
        Some(p) if !p.exists() => Err(LsimError::MissingFile(p.clone())),
        Some(p) => Ok(fs::read_to_string(p)?),
        None => Ok(default.to_string()),
    }
}

/// A configured run: the config plus the llm and encoder it resolved to.
pub struct Pipeline {
    pub config: RunConfig,
    llm: Box<dyn LlmClient>,
    encoder: Box<dyn TextEncoder>,
    templates: Templates,
}

impl Pipeline {
    /// Builds the providers named by the config.
    pub fn new(config: RunConfig) -> Result<Self> {
        let llm: Box<dyn LlmClient> = match config.llm {
            LlmProvider::Mock => Box::new(MockLlm::new()),
            LlmProvider::Remote => Box::new(RemoteLlm::from_env()?),
        };
        let encoder = config.encoder.build()?;
        Self::with_providers(config, llm, encoder)
    }

    pub fn with_providers(config: RunConfig, llm: Box<dyn LlmClient>, encoder: Box<dyn TextEncoder>) -> Result<Self> {
        config.validate()?;
        if encoder.dim() != config.encoder.dim {
            return Err(LsimError::Config(format!(
                "encoder produces dim {}, config says {}",
                encoder.dim(),
                config.encoder.dim
            )));
        }
        let p = &config.paths;
        let templates = Templates {
            graph: read_template(&p.graph_template, DEFAULT_GRAPH_TEMPLATE)?,
            chain: read_template(&p.chain_template, DEFAULT_CHAIN_TEMPLATE)?,
            relevance: read_template(&p.relevance_template, DEFAULT_RELEVANCE_TEMPLATE)?,
            answer: read_template(&p.answer_template, DEFAULT_ANSWER_TEMPLATE)?,
        };
        check_template(&templates.answer)?;
        Ok(Self {
            config,
            llm,
            encoder,
            templates,
        })
    }

    pub fn run_dir(&self) -> &Path {
        &self.config.paths.run_dir
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.run_dir().join(rel)
    }

    fn require(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(LsimError::MissingArtifact(p))
        }
    }

    fn extraction_settings(&self) -> ExtractionSettings {
        ExtractionSettings {
            graph_template: self.templates.graph.clone(),
            chain_template: self.templates.chain.clone(),
            generation: self.config.generation.clone(),
            retry: self.config.retry,
        }
    }

    fn finish(&self, stage: &'static str, started: u64, artifacts: Vec<PathBuf>, summary: String) -> Result<StageReport> {
        let run_dir = self.run_dir();
        let mut manifest = RunManifest::load(run_dir)?;
        manifest.version = env!("CARGO_PKG_VERSION").to_string();
        manifest.seed = self.config.seed;
        manifest.config = Some(self.config.clone());
        let mut entry = StageEntry {
            started_unix: started,
            finished_unix: unix_now(),
            artifacts: BTreeMap::new(),
        };
        for path in &artifacts {
            let rel = path
                .strip_prefix(run_dir)
                .unwrap_or(path)
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            entry.artifacts.insert(rel, file_digest(path)?);
        }
        manifest.stages.insert(stage.to_string(), entry);
        fs::write(run_dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
        log::info!("{stage}: {summary}");
        Ok(StageReport {
            stage,
            artifacts,
            summary,
        })
    }

    pub fn ingest(&self) -> Result<StageReport> {
        let started = unix_now();
        let pairs = load_dataset(&self.config.paths.dataset)?;
        fs::create_dir_all(self.run_dir())?;
        let out = self.path(DATASET);
        write_dataset(&out, &pairs)?;
        self.finish("ingest", started, vec![out], format!("{} records", pairs.len()))
    }

    pub fn split(&self) -> Result<StageReport> {
        let started = unix_now();
        let pairs = load_dataset(self.require(DATASET)?)?;
        let splits = split_dataset(&pairs, self.config.seed)?;
        fs::create_dir_all(self.path("splits"))?;
        let files = [
            (SPLIT_DATABASE, &splits.database),
            (SPLIT_TRAIN, &splits.train),
            (SPLIT_TEST, &splits.test),
        ];
        let mut written = Vec::new();
        for (rel, part) in files {
            write_dataset(self.path(rel), part)?;
            written.push(self.path(rel));
        }
        let (d, tr, te) = splits.sizes();
        self.finish("split", started, written, format!("database {d}, train {tr}, test {te}"))
    }

    pub fn load_splits(&self) -> Result<DataSplits> {
        Ok(DataSplits {
            database: load_dataset(self.require(SPLIT_DATABASE)?)?,
            train: load_dataset(self.require(SPLIT_TRAIN)?)?,
            test: load_dataset(self.require(SPLIT_TEST)?)?,
        })
    }

    /// The graph is built from the training split only.
    pub fn build_graph(&self) -> Result<StageReport> {
        let started = unix_now();
        let splits = self.load_splits()?;
        let built = build_graph(&splits.train, self.llm.as_ref(), &self.extraction_settings())?;
        let out = self.path(GRAPH);
        built.graph.save(&out)?;
        let warn = self.path(GRAPH_WARNINGS);
        fs::write(&warn, built.warnings.iter().map(|w| format!("{w}\n")).collect::<String>())?;
        let summary = format!(
            "{} nodes, {} edges, {} warnings",
            built.graph.len(),
            built.graph.edges().len(),
            built.warnings.len()
        );
        self.finish("build-graph", started, vec![out, warn], summary)
    }

    pub fn load_graph(&self) -> Result<FactRuleGraph> {
        FactRuleGraph::load(self.require(GRAPH)?)
    }

    /// Extracts chains for every pair, appending one record per pair.
    /// Records already on disk are kept, so an interrupted run resumes where
    /// it stopped; a partially written last line is discarded.
    pub fn extract_chains(&self) -> Result<StageReport> {
        let started = unix_now();
        let splits = self.load_splits()?;
        let graph = self.load_graph()?;
        let index = LabelIndex::new(&graph, self.encoder.as_ref())?;
        let settings = self.extraction_settings();
        let out = self.path(CHAINS);
        let done = resume_jsonl::<ChainRecord>(&out)?;
        let done_ids: BTreeSet<String> = done.iter().map(|r| r.id.clone()).collect();
        let todo: Vec<(SplitName, &QaPair)> = [
            (SplitName::Database, &splits.database),
            (SplitName::Train, &splits.train),
            (SplitName::Test, &splits.test),
        ]
        .into_iter()
        .flat_map(|(s, pairs)| pairs.iter().map(move |p| (s, p)))
        .filter(|(_, p)| !done_ids.contains(&p.id))
        .collect();
        if !done.is_empty() {
            log::info!("extract-chains: resuming after {} records, {} left", done.len(), todo.len());
        }
        let mut file = OpenOptions::new().create(true).append(true).open(&out)?;
        let mut warnings = done.iter().map(|r| r.warnings.len()).sum::<usize>();
        for chunk in todo.chunks(32) {
            let results: Vec<Result<ChainRecord>> = chunk
                .par_iter()
                .map(|(split, pair)| self.chain_record(*split, pair, &index, &settings))
                .collect();
            for result in results {
                let record = result?;
                warnings += record.warnings.len();
                let mut line = serde_json::to_string(&record)?;
                line.push('\n');
                file.write_all(line.as_bytes())?;
            }
            file.flush()?;
        }
        let total = done.len() + todo.len();
        self.finish(
            "extract-chains",
            started,
            vec![out],
            format!("{total} records ({} resumed), {warnings} warnings", done.len()),
        )
    }

    fn chain_record(&self, split: SplitName, pair: &QaPair, index: &LabelIndex<'_>, settings: &ExtractionSettings) -> Result<ChainRecord> {
        if split == SplitName::Train {
            let ex = extract_chain(pair, index, self.llm.as_ref(), settings)?;
            return Ok(ChainRecord {
                id: pair.id.clone(),
                split,
                question_chain: ex.question_chain.node_ids,
                answer_chain: Some(ex.answer_chain.node_ids),
                warnings: ex.warnings,
            });
        }
        let mut warnings = Vec::new();
        let chain = crate::fact_rule::extract_text_chain(
            &pair.question_text,
            ChainOwner::Question,
            index,
            self.llm.as_ref(),
            settings,
            &mut warnings,
        )?;
        Ok(ChainRecord {
            id: pair.id.clone(),
            split,
            question_chain: chain.node_ids,
            answer_chain: None,
            warnings,
        })
    }

    /// Chain records by id, each checked against the graph.
    pub fn load_chains(&self, graph: &FactRuleGraph) -> Result<BTreeMap<String, ChainRecord>> {
        let mut out = BTreeMap::new();
        for r in read_jsonl::<ChainRecord>(self.require(CHAINS)?)? {
            FactRuleChain::new(r.question_chain.clone(), ChainOwner::Question).validate(graph)?;
            if let Some(a) = &r.answer_chain {
                FactRuleChain::new(a.clone(), ChainOwner::Answer).validate(graph)?;
            }
            out.insert(r.id.clone(), r);
        }
        Ok(out)
    }

    /// Trains the policy on training chains, then writes the predicted chain
    /// of every pair.
    pub fn train_policy(&self) -> Result<StageReport> {
        let started = unix_now();
        let splits = self.load_splits()?;
        let graph = self.load_graph()?;
        let chains = self.load_chains(&graph)?;
        let chain_of = |id: &str| {
            chains
                .get(id)
                .ok_or_else(|| LsimError::InvalidInput(format!("no extracted chain for `{id}`")))
        };
        let mut train = Vec::with_capacity(splits.train.len());
        for pair in &splits.train {
            let r = chain_of(&pair.id)?;
            let answer = r
                .answer_chain
                .clone()
                .ok_or_else(|| LsimError::InvalidInput(format!("training pair `{}` lacks an answer chain", pair.id)))?;
            train.push((
                FactRuleChain::new(r.question_chain.clone(), ChainOwner::Question),
                FactRuleChain::new(answer, ChainOwner::Answer),
            ));
        }
        let ctx = PolicyContext::new(&graph, self.encoder.as_ref())?;
        let trained = train_policy(&train, &ctx, &self.config.policy)?;
        let ckpt = self.path(POLICY_CHECKPOINT);
        trained.model.save(&ckpt)?;
        let log_path = self.path(POLICY_LOG);
        write_jsonl(&log_path, &trained.history)?;

        let all: Vec<&QaPair> = splits.database.iter().chain(&splits.train).chain(&splits.test).collect();
        let predicted = all
            .par_iter()
            .map(|pair| {
                let q = FactRuleChain::new(chain_of(&pair.id)?.question_chain.clone(), ChainOwner::Question);
                let p = predict_chain(
                    &q,
                    &trained.model,
                    &ctx,
                    self.config.policy.action_mode,
                    self.config.policy.inference_steps,
                )?;
                Ok(PredictedRecord {
                    id: pair.id.clone(),
                    node_ids: p.node_ids,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let pred_path = self.path(PREDICTED_CHAINS);
        write_jsonl(&pred_path, &predicted)?;
        let last = trained.history.last().map_or(0.0, |h| h.mean_return);
        self.finish(
            "train-policy",
            started,
            vec![ckpt, log_path, pred_path],
            format!("{} epochs, final mean return {last:.4}", trained.history.len()),
        )
    }

    pub fn load_predicted(&self, graph: &FactRuleGraph) -> Result<HashMap<String, FactRuleChain>> {
        read_jsonl::<PredictedRecord>(self.require(PREDICTED_CHAINS)?)?
            .into_iter()
            .map(|r| {
                let chain = FactRuleChain::new(r.node_ids, ChainOwner::Predicted);
                chain.validate(graph)?;
                Ok((r.id, chain))
            })
            .collect()
    }

    /// Unmasked features `[encode(C^z) ++ encode(question)]` for `pairs`.
    fn features(
        &self,
        pairs: &[&QaPair],
        predicted: &HashMap<String, FactRuleChain>,
        graph: &FactRuleGraph,
    ) -> Result<HashMap<String, FeatureVector>> {
        pairs
            .par_iter()
            .map(|pair| {
                let chain = predicted
                    .get(&pair.id)
                    .ok_or_else(|| LsimError::InvalidInput(format!("no predicted chain for `{}`", pair.id)))?;
                let f = crate::dssm::build_features(&pair.question_text, chain, graph, self.encoder.as_ref(), Ablation::None)?;
                Ok((pair.id.clone(), f))
            })
            .collect()
    }

    /// Annotates a cosine-prefiltered candidate pool per training question,
    /// derives triplets and trains the ranker on features masked by
    /// `config.ablation`.
    pub fn train_dssm(&self) -> Result<StageReport> {
        let started = unix_now();
        let splits = self.load_splits()?;
        let graph = self.load_graph()?;
        let predicted = self.load_predicted(&graph)?;
        let pairs: Vec<&QaPair> = splits.database.iter().chain(&splits.train).collect();
        let features = self.features(&pairs, &predicted, &graph)?;

        let db_semantic: Vec<(String, EmbeddingVector)> = splits
            .database
            .iter()
            .map(|p| (p.id.clone(), features[&p.id].semantic.clone()))
            .collect();
        let by_id: HashMap<&str, &QaPair> = splits.database.iter().map(|p| (p.id.as_str(), p)).collect();
        let mut jobs = Vec::new();
        for q in &splits.train {
            for cid in candidate_pool(&q.id, &features[&q.id].semantic, &db_semantic, self.config.dssm.pool_size)? {
                jobs.push((q, by_id[cid.as_str()]));
            }
        }
        let settings = RelevanceSettings {
            template: self.templates.relevance.clone(),
            generation: self.config.generation.clone(),
            retry: self.config.retry,
        };
        let outcomes: Vec<Result<RelevanceJudgment>> = jobs
            .par_iter()
            .map(|(q, c)| annotate_relevance(q, c, self.llm.as_ref(), &settings))
            .collect();
        let mut judgments = Vec::new();
        let mut failures = String::new();
        for ((q, c), outcome) in jobs.iter().zip(outcomes) {
            match outcome {
                Ok(j) => judgments.push(j),
                Err(e) => {
                    log::warn!("relevance judgment ({}, {}) skipped: {e}", q.id, c.id);
                    failures.push_str(&format!("{}\t{}\t{e}\n", q.id, c.id));
                }
            }
        }
        let mut per_query: BTreeMap<&str, usize> = BTreeMap::new();
        for j in &judgments {
            *per_query.entry(&j.query_id).or_default() += 1;
        }
        let usable: Vec<RelevanceJudgment> = judgments
            .iter()
            .filter(|j| per_query[j.query_id.as_str()] >= 2)
            .cloned()
            .collect();
        let (triplets, dropped) = build_triplets(&usable)?;
        let judg_path = self.path(JUDGMENTS);
        write_jsonl(&judg_path, &judgments)?;
        let fail_path = self.path(JUDGMENT_FAILURES);
        fs::write(&fail_path, failures)?;
        let trip_path = self.path(TRIPLETS);
        write_jsonl(&trip_path, &triplets)?;
        if triplets.is_empty() {
            return Err(LsimError::InvalidInput("relevance judgments produced no usable triplets".into()));
        }
        let masked = mask_all(&features, self.config.ablation);
        let trained = train_dssm(&triplets, &masked, &self.config.dssm)?;
        let ckpt = self.path(DSSM_CHECKPOINT);
        trained.model.save(&ckpt)?;
        let log_path = self.path(DSSM_LOG);
        write_jsonl(&log_path, &trained.history)?;
        let last = trained.history.last().map_or(0.0, |h| h.mean_loss);
        let summary = format!(
            "{} judgments, {} triplets ({} queries dropped), final mean loss {last:.6}",
            judgments.len(),
            triplets.len(),
            dropped.len()
        );
        self.finish("train-dssm", started, vec![judg_path, fail_path, trip_path, ckpt, log_path], summary)
    }

    /// Top-k database questions for every test question.
    pub fn retrieve(&self) -> Result<StageReport> {
        let started = unix_now();
        let model = DssmModel::load(self.require(DSSM_CHECKPOINT)?)?;
        let out = self.retrieve_into(self.run_dir(), &model, self.config.ablation)?;
        self.finish("retrieve", started, vec![out], format!("k = {}", self.config.k))
    }

    fn retrieve_into(&self, dir: &Path, model: &DssmModel, ablation: Ablation) -> Result<PathBuf> {
        let splits = self.load_splits()?;
        let graph = self.load_graph()?;
        let predicted = self.load_predicted(&graph)?;
        let pairs: Vec<&QaPair> = splits.database.iter().chain(&splits.test).collect();
        let features = mask_all(&self.features(&pairs, &predicted, &graph)?, ablation);
        let database: Vec<(String, FeatureVector)> = splits
            .database
            .iter()
            .map(|p| (p.id.clone(), features[&p.id].clone()))
            .collect();
        let records = splits
            .test
            .iter()
            .map(|q| {
                Ok(RetrievalRecord {
                    query_id: q.id.clone(),
                    results: retrieve_topk(&features[&q.id], &database, model, self.config.k)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        fs::create_dir_all(dir)?;
        let out = dir.join(RETRIEVAL);
        write_jsonl(&out, &records)?;
        Ok(out)
    }

    /// Generates `repeats` answers per test question.
    pub fn answer(&self) -> Result<StageReport> {
        let started = unix_now();
        let files = self.answer_into(self.run_dir())?;
        let n = files.len() / 2;
        self.finish("answer", started, files, format!("{n} repeat(s)"))
    }

    fn answer_into(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let splits = self.load_splits()?;
        let graph = self.load_graph()?;
        let chains = self.load_chains(&graph)?;
        let predicted = self.load_predicted(&graph)?;
        let retrieval: HashMap<String, Vec<RetrievalResult>> = read_jsonl::<RetrievalRecord>(require_in(dir, RETRIEVAL)?)?
            .into_iter()
            .map(|r| (r.query_id, r.results))
            .collect();
        let database: HashMap<String, QaPair> = splits.database.iter().map(|p| (p.id.clone(), p.clone())).collect();
        fs::create_dir_all(dir.join("answers"))?;
        let mut written = Vec::new();
        for repeat in 0..self.config.repeats {
            let mut generation = self.config.generation.clone();
            generation.seed = Some(self.config.seed + repeat as u64);
            let log = RunLog::new();
            let answers = splits
                .test
                .par_iter()
                .map(|q| {
                    let results = retrieval
                        .get(&q.id)
                        .ok_or_else(|| LsimError::InvalidInput(format!("no retrieval results for `{}`", q.id)))?;
                    let context = assemble_context(results, &database, self.config.k)?;
                    let chain = if self.config.use_predicted_chain {
                        predicted
                            .get(&q.id)
                            .cloned()
                            .ok_or_else(|| LsimError::InvalidInput(format!("no predicted chain for `{}`", q.id)))?
                    } else {
                        let r = chains
                            .get(&q.id)
                            .ok_or_else(|| LsimError::InvalidInput(format!("no extracted chain for `{}`", q.id)))?;
                        FactRuleChain::new(r.question_chain.clone(), ChainOwner::Question)
                    };
                    let request = AnswerRequest {
                        question: q,
                        chain: &chain,
                        graph: &graph,
                        context: &context,
                        template: &self.templates.answer,
                    };
                    let answer = generate_answer(&request, self.llm.as_ref(), &generation, &self.config.retry, &log)?;
                    Ok(AnswerRecord {
                        id: q.id.clone(),
                        answer,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let ans_path = dir.join(answers_file(repeat));
            write_jsonl(&ans_path, &answers)?;
            let log_path = dir.join(format!("answers/llm_log_{repeat}.jsonl"));
            log.write_jsonl(&log_path)?;
            written.push(ans_path);
            written.push(log_path);
        }
        Ok(written)
    }

    /// Scores every repeat against the reference answers and averages.
    pub fn evaluate(&self) -> Result<StageReport> {
        let started = unix_now();
        let (summary, files) = self.evaluate_into(self.run_dir())?;
        let m = summary.mean;
        let text = format!(
            "METEOR {:.2}, ROUGE-1 {:.2}, ROUGE-2 {:.2}, ROUGE-L {:.2}, BERTScore(proxy) {:.2}",
            m.meteor, m.rouge1_f, m.rouge2_f, m.rouge_l_f, m.bertscore_proxy
        );
        self.finish("evaluate", started, files, text)
    }

    fn evaluate_into(&self, dir: &Path) -> Result<(MetricsSummary, Vec<PathBuf>)> {
        let splits = self.load_splits()?;
        let references: Vec<(String, String)> = splits.test.iter().map(|p| (p.id.clone(), p.answer_text.clone())).collect();
        let mut reports = Vec::new();
        let mut files = Vec::new();
        for repeat in 0..self.config.repeats {
            let predictions: Vec<(String, String)> = read_jsonl::<AnswerRecord>(require_in(dir, &answers_file(repeat))?)?
                .into_iter()
                .map(|a| (a.id, a.answer))
                .collect();
            let report = evaluate_run(&predictions, &references, self.encoder.as_ref())?;
            let per = dir.join(format!("answers/per_example_{repeat}.jsonl"));
            report.write_per_example(&per)?;
            files.push(per);
            reports.push(report);
        }
        let mean = MetricsReport::mean_of(&reports).expect("at least one repeat");
        let summary = MetricsSummary {
            examples: references.len(),
            repeats: reports.len(),
            mean: Aggregates::of(&mean),
            per_repeat: reports.iter().map(Aggregates::of).collect(),
        };
        let metrics = dir.join(METRICS);
        fs::write(&metrics, serde_json::to_string_pretty(&summary)? + "\n")?;
        let table = dir.join(METRICS_TABLE);
        fs::write(&table, format_table(&[("LSIM", &mean)]))?;
        files.push(metrics);
        files.push(table);
        Ok((summary, files))
    }

    /// Retrains the ranker with one feature half masked, then reruns
    /// retrieval, generation and evaluation under `ablation/<mode>/`. The
    /// comparison table lists the unablated run first.
    pub fn ablate(&self, modes: &[Ablation]) -> Result<StageReport> {
        let started = unix_now();
        if modes.is_empty() || modes.contains(&Ablation::None) {
            return Err(LsimError::Config("ablate takes no_logical and/or no_semantic".into()));
        }
        let base: MetricsSummary = serde_json::from_str(&fs::read_to_string(self.require(METRICS)?)?)?;
        let splits = self.load_splits()?;
        let graph = self.load_graph()?;
        let predicted = self.load_predicted(&graph)?;
        let triplets: Vec<TripletExample> = read_jsonl(self.require(TRIPLETS)?)?;
        let pairs: Vec<&QaPair> = splits.database.iter().chain(&splits.train).collect();
        let features = self.features(&pairs, &predicted, &graph)?;
        let mut rows = vec![("LSIM".to_string(), base.mean)];
        let mut files = Vec::new();
        for &mode in modes {
            let dir = self.path("ablation").join(mode.label());
            fs::create_dir_all(&dir)?;
            let trained = train_dssm(&triplets, &mask_all(&features, mode), &self.config.dssm)?;
            let ckpt = dir.join(DSSM_CHECKPOINT);
            trained.model.save(&ckpt)?;
            files.push(ckpt);
            files.push(self.retrieve_into(&dir, &trained.model, mode)?);
            files.extend(self.answer_into(&dir)?);
            let (summary, eval_files) = self.evaluate_into(&dir)?;
            files.extend(eval_files);
            let name = match mode {
                Ablation::NoLogical => "LSIM w/o LS",
                _ => "LSIM w/o SI",
            };
            rows.push((name.to_string(), summary.mean));
        }
        let reports: Vec<(String, MetricsReport)> = rows.iter().map(|(n, a)| (n.clone(), a.report())).collect();
        let table = format_table(&reports.iter().map(|(n, r)| (n.as_str(), r)).collect::<Vec<_>>());
        let table_path = self.path(ABLATION_TABLE);
        fs::write(&table_path, &table)?;
        files.push(table_path);
        self.finish("ablate", started, files, format!("\n{table}"))
    }

    /// ingest through evaluate, in order.
    pub fn run_all(&self) -> Result<Vec<StageReport>> {
        Ok(vec![
            self.ingest()?,
            self.split()?,
            self.build_graph()?,
            self.extract_chains()?,
            self.train_policy()?,
            self.train_dssm()?,
            self.retrieve()?,
            self.answer()?,
            self.evaluate()?,
        ])
    }
}

pub fn answers_file(repeat: usize) -> String {
    format!("answers/repeat_{repeat}.jsonl")
}

fn require_in(dir: &Path, rel: &str) -> Result<PathBuf> {
    let p = dir.join(rel);
    if p.exists() {
        Ok(p)
    } else {
        Err(LsimError::MissingArtifact(p))
    }
}

fn mask_all(features: &HashMap<String, FeatureVector>, ablation: Ablation) -> HashMap<String, FeatureVector> {
    features.iter().map(|(k, f)| (k.clone(), f.masked(ablation))).collect()
}

/// Reads the complete records of a line-delimited file and truncates any
/// trailing partial line so appends start on a fresh line.
fn resume_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let bytes = fs::read(path)?;
    let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    if complete < bytes.len() {
        log::warn!("{}: discarding a partial trailing record", path.display());
        File::options().write(true).open(path)?.set_len(complete as u64)?;
    }
    let text = std::str::from_utf8(&bytes[..complete]).map_err(|e| LsimError::MalformedRecord {
        path: path.to_path_buf(),
        line: 0,
        reason: e.to_string(),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| LsimError::MalformedRecord {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}
