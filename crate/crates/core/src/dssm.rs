//! Supervised ranking of database questions.
//!
//! Each question gets a feature vector `[h_chain ++ h_text]`; the scorer is a
//! four-layer tanh network over `[e_query ++ e_candidate]` trained with a
//! margin ranking loss on triplets derived from llm relevance judgments.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::QaPair;
use crate::embedding::{cosine_similarity, EmbeddingVector, TextEncoder};
use crate::error::{LsimError, Result};
use crate::fact_rule::{serialize_chain, FactRuleChain, FactRuleGraph};
use crate::llm::{complete_parsed, GenerationConfig, LlmClient, RetryPolicy};
use crate::neural::{adam_step, load_checkpoint, save_checkpoint, AdamState, Mlp, MlpGradients, OutputActivation};

pub const RELEVANCE_INSTRUCTION: &str = "Please score the similarity of Question2 to Question1, focusing specifically on the events described in each legal question. Rate the similarity of Question2 to Question1 on a scale from 0 to 5, where 0 indicates that Question2 is completely different from Question1, and 5 indicates that Question2 is exactly the same as Question1.";

pub const DEFAULT_RELEVANCE_TEMPLATE: &str = "Please score the similarity of Question2 to Question1, focusing specifically on the events described in each legal question. Rate the similarity of Question2 to Question1 on a scale from 0 to 5, where 0 indicates that Question2 is completely different from Question1, and 5 indicates that Question2 is exactly the same as Question1.
Respond with a single integer.

Question1:
{query}

Question2:
{candidate}
";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    NoLogical,
    NoSemantic,
}

impl Ablation {
    pub fn label(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoLogical => "no_logical",
            Ablation::NoSemantic => "no_semantic",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Ablation {
    type Err = LsimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "no_logical" | "no-logical" => Ok(Ablation::NoLogical),
            "no_semantic" | "no-semantic" => Ok(Ablation::NoSemantic),
            other => Err(LsimError::Config(format!("unknown ablation mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub logical: EmbeddingVector,
    pub semantic: EmbeddingVector,
}

impl FeatureVector {
    pub fn new(logical: EmbeddingVector, semantic: EmbeddingVector) -> Result<Self> {
        if logical.dim() != semantic.dim() {
            return Err(LsimError::ShapeMismatch(format!(
                "logical dim {} vs semantic dim {}",
                logical.dim(),
                semantic.dim()
            )));
        }
        Ok(Self { logical, semantic })
    }

    pub fn dim(&self) -> usize {
        2 * self.logical.dim()
    }

    pub fn combined(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(self.logical.values());
        v.extend_from_slice(self.semantic.values());
        v
    }

    /// Zeroes the ablated half; dimensions are unchanged.
    pub fn masked(&self, ablation: Ablation) -> Self {
        let zeros = EmbeddingVector::zeros(self.logical.dim());
        match ablation {
            Ablation::None => self.clone(),
            Ablation::NoLogical => Self {
                logical: zeros,
                semantic: self.semantic.clone(),
            },
            Ablation::NoSemantic => Self {
                logical: self.logical.clone(),
                semantic: zeros,
            },
        }
    }
}

pub fn build_features(
    text: &str,
    chain: &FactRuleChain,
    graph: &FactRuleGraph,
    encoder: &dyn TextEncoder,
    ablation: Ablation,
) -> Result<FeatureVector> {
    if text.trim().is_empty() {
        return Err(LsimError::InvalidInput("feature text is empty".into()));
    }
    chain.validate(graph)?;
    let logical = encoder.encode(&serialize_chain(chain, graph)?)?;
    let semantic = encoder.encode(text)?;
    Ok(FeatureVector::new(logical, semantic)?.masked(ablation))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DssmConfig {
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub hidden_widths: Vec<usize>,
    /// Candidates judged by the llm per training query.
    pub pool_size: usize,
    pub seed: u64,
}

impl Default for DssmConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            learning_rate: 1e-4,
            epochs: 50,
            hidden_widths: vec![512, 256, 128],
            pool_size: 20,
            seed: 0,
        }
    }
}

impl DssmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(LsimError::Config("dssm alpha must be nonnegative".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(LsimError::Config("dssm learning_rate must be positive".into()));
        }
        if self.hidden_widths.len() != 3 || self.hidden_widths.contains(&0) {
            return Err(LsimError::Config("dssm needs exactly three positive hidden widths".into()));
        }
        if self.pool_size < 2 {
            return Err(LsimError::Config("dssm pool_size must be at least 2".into()));
        }
        Ok(())
    }
}

/// Four dense layers over `[e_query ++ e_candidate]`, tanh hidden, affine output.
#[derive(Debug, Clone, PartialEq)]
pub struct DssmModel {
    pub mlp: Mlp,
}

impl DssmModel {
    pub fn new<R: rand::Rng + ?Sized>(feature_dim: usize, hidden_widths: &[usize], rng: &mut R) -> Self {
        let mut dims = vec![2 * feature_dim];
        dims.extend(hidden_widths);
        dims.push(1);
        Self {
            mlp: Mlp::new(&dims, OutputActivation::Identity, rng),
        }
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self> {
        if mlp.output_dim() != 1 || !mlp.input_dim().is_multiple_of(4) || mlp.layers.len() != 4 {
            return Err(LsimError::ShapeMismatch(format!(
                "dssm needs four layers mapping 4*dim -> 1, got {:?}",
                mlp.shapes()
            )));
        }
        Ok(Self { mlp })
    }

    pub fn feature_dim(&self) -> usize {
        self.mlp.input_dim() / 2
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        save_checkpoint(path, &self.mlp, None)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_mlp(load_checkpoint(path)?.0)
    }
}

fn pair_input(query: &FeatureVector, candidate: &FeatureVector) -> Vec<f64> {
    let mut x = query.combined();
    x.extend(candidate.combined());
    x
}

pub fn score_pair(query: &FeatureVector, candidate: &FeatureVector, model: &DssmModel) -> Result<f64> {
    Ok(model.mlp.forward(&pair_input(query, candidate))?.0[0])
}

/// `max(0, α − p⁺ + p⁻)`, computed through the gap `p⁺ − p⁻` so that the
/// loss is zero exactly when the gap reaches the margin.
pub fn margin_loss(p_pos: f64, p_neg: f64, alpha: f64) -> f64 {
    let gap = p_pos - p_neg;
    if gap >= alpha {
        0.0
    } else {
        alpha - gap
    }
}

/// Loss and parameter gradient for one triplet. The gradient is
/// `∇p⁻ − ∇p⁺` while the margin is violated and zero otherwise.
pub fn triplet_loss_and_grad(
    model: &DssmModel,
    query: &FeatureVector,
    positive: &FeatureVector,
    negative: &FeatureVector,
    alpha: f64,
) -> Result<(f64, MlpGradients)> {
    let (pos, pos_cache) = model.mlp.forward(&pair_input(query, positive))?;
    let (neg, neg_cache) = model.mlp.forward(&pair_input(query, negative))?;
    let loss = margin_loss(pos[0], neg[0], alpha);
    let mut grads = MlpGradients::zeros_like(&model.mlp);
    if loss > 0.0 {
        grads.add_scaled(&model.mlp.backward(&pos_cache, &[-1.0])?, 1.0);
        grads.add_scaled(&model.mlp.backward(&neg_cache, &[1.0])?, 1.0);
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceJudgment {
    pub query_id: String,
    pub candidate_id: String,
    pub score: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletExample {
    pub query_id: String,
    pub positive_id: String,
    pub negative_id: String,
}

/// First integer in the reply that lies in 0..=5.
pub fn parse_relevance(reply: &str) -> Option<u8> {
    reply
        .split(|c: char| !c.is_ascii_digit())
        .filter(|run| !run.is_empty())
        .filter_map(|run| run.parse::<u64>().ok())
        .find(|&v| v <= 5)
        .map(|v| v as u8)
}

pub fn relevance_prompt(query: &QaPair, candidate: &QaPair, template: &str) -> String {
    let flat = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ");
    template
        .replace("{query}", &flat(&query.question_text))
        .replace("{candidate}", &flat(&candidate.question_text))
}

#[derive(Debug, Clone)]
pub struct RelevanceSettings {
    pub template: String,
    pub generation: GenerationConfig,
    pub retry: RetryPolicy,
}

impl Default for RelevanceSettings {
    fn default() -> Self {
        Self {
            template: DEFAULT_RELEVANCE_TEMPLATE.to_string(),
            generation: GenerationConfig::default(),
            retry: RetryPolicy::default(),
        }
    }
}

/// Unparseable replies are retried like failed calls.
pub fn annotate_relevance(
    query: &QaPair,
    candidate: &QaPair,
    llm: &dyn LlmClient,
    settings: &RelevanceSettings,
) -> Result<RelevanceJudgment> {
    let prompt = relevance_prompt(query, candidate, &settings.template);
    let (score, _) = complete_parsed(llm, &prompt, &settings.generation, &settings.retry, |reply| {
        parse_relevance(reply).ok_or_else(|| format!("no score in 0..=5 in reply {reply:?}"))
    })?;
    Ok(RelevanceJudgment {
        query_id: query.id.clone(),
        candidate_id: candidate.id.clone(),
        score,
    })
}

/// Up to `pool_size` database ids most cosine-similar to `query`, excluding
/// the query's own id; ties go to the smaller id.
pub fn candidate_pool(
    query_id: &str,
    query: &EmbeddingVector,
    database: &[(String, EmbeddingVector)],
    pool_size: usize,
) -> Result<Vec<String>> {
    let mut scored = database
        .iter()
        .filter(|(id, _)| id != query_id)
        .map(|(id, emb)| Ok((id.clone(), cosine_similarity(query, emb)?)))
        .collect::<Result<Vec<_>>>()?;
    sort_desc(&mut scored);
    scored.truncate(pool_size);
    Ok(scored.into_iter().map(|(id, _)| id).collect())
}

fn sort_desc(scored: &mut [(String, f64)]) {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

/// Per query: positive = highest score, negative = lowest, ties to the
/// smaller candidate id. Queries whose scores are all equal are dropped and
/// reported in the returned warnings.
pub fn build_triplets(judgments: &[RelevanceJudgment]) -> Result<(Vec<TripletExample>, Vec<String>)> {
    let mut by_query: BTreeMap<&str, Vec<(&str, u8)>> = BTreeMap::new();
    for j in judgments {
        if j.score > 5 {
            return Err(LsimError::InvalidInput(format!("relevance score {} outside 0..=5", j.score)));
        }
        by_query.entry(&j.query_id).or_default().push((&j.candidate_id, j.score));
    }
    let mut triplets = Vec::new();
    let mut warnings = Vec::new();
    for (query, mut cands) in by_query {
        if cands.len() < 2 {
            return Err(LsimError::InvalidInput(format!("query `{query}` has fewer than 2 judged candidates")));
        }
        cands.sort();
        let max = cands.iter().map(|c| c.1).max().expect("nonempty");
        let min = cands.iter().map(|c| c.1).min().expect("nonempty");
        if max == min {
            let w = format!("query `{query}`: all candidates scored {max}, dropped");
            log::warn!("{w}");
            warnings.push(w);
            continue;
        }
        let pos = cands.iter().find(|c| c.1 == max).expect("max exists").0;
        let neg = cands.iter().find(|c| c.1 == min).expect("min exists").0;
        triplets.push(TripletExample {
            query_id: query.to_string(),
            positive_id: pos.to_string(),
            negative_id: neg.to_string(),
        });
    }
    Ok((triplets, warnings))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DssmEpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone)]
pub struct DssmTraining {
    pub model: DssmModel,
    pub history: Vec<DssmEpochLog>,
}

/// Adam over triplets in a seeded per-epoch order, one step per triplet.
pub fn train_dssm(
    triplets: &[TripletExample],
    features: &HashMap<String, FeatureVector>,
    config: &DssmConfig,
) -> Result<DssmTraining> {
    config.validate()?;
    if triplets.is_empty() {
        return Err(LsimError::InvalidInput("dssm training needs at least one triplet".into()));
    }
    let lookup = |id: &str| {
        features
            .get(id)
            .ok_or_else(|| LsimError::InvalidInput(format!("no features for `{id}`")))
    };
    let mut resolved = Vec::with_capacity(triplets.len());
    for t in triplets {
        resolved.push((lookup(&t.query_id)?, lookup(&t.positive_id)?, lookup(&t.negative_id)?));
    }
    let feature_dim = resolved[0].0.dim();
    if resolved.iter().any(|(q, p, n)| q.dim() != feature_dim || p.dim() != feature_dim || n.dim() != feature_dim) {
        return Err(LsimError::ShapeMismatch("features differ in dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = DssmModel::new(feature_dim, &config.hidden_widths, &mut rng);
    let mut adam = AdamState::new(&model.mlp);
    let mut order: Vec<usize> = (0..resolved.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (q, p, n) = resolved[i];
            let (loss, grads) = triplet_loss_and_grad(&model, q, p, n, config.alpha)?;
            adam_step(&mut model.mlp, &grads, &mut adam, config.learning_rate)?;
            total += loss;
        }
        let mean_loss = total / resolved.len() as f64;
        log::info!("dssm epoch {epoch}: mean loss {mean_loss:.6}");
        history.push(DssmEpochLog { epoch, mean_loss });
    }
    Ok(DssmTraining { model, history })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub candidate_id: String,
    pub score: f64,
    pub rank: usize,
}

fn rank(mut scored: Vec<(String, f64)>, k: usize) -> Vec<RetrievalResult> {
    sort_desc(&mut scored);
    scored
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (candidate_id, score))| RetrievalResult {
            candidate_id,
            score,
            rank: i + 1,
        })
        .collect()
}

/// Scores every candidate and keeps the best `min(k, n)`, ties to the
/// smaller id.
pub fn retrieve_topk(
    query: &FeatureVector,
    database: &[(String, FeatureVector)],
    model: &DssmModel,
    k: usize,
) -> Result<Vec<RetrievalResult>> {
    if k == 0 {
        return Err(LsimError::InvalidInput("k must be at least 1".into()));
    }
    if database.is_empty() {
        return Err(LsimError::InvalidInput("retrieval over an empty database".into()));
    }
    let scored = database
        .par_iter()
        .map(|(id, f)| Ok((id.clone(), score_pair(query, f, model)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(rank(scored, k))
}

/// Cosine-similarity baseline over plain embeddings, same ordering rules.
pub fn cosine_topk(query: &EmbeddingVector, database: &[(String, EmbeddingVector)], k: usize) -> Result<Vec<RetrievalResult>> {
    if k == 0 {
        return Err(LsimError::InvalidInput("k must be at least 1".into()));
    }
    if database.is_empty() {
        return Err(LsimError::InvalidInput("retrieval over an empty database".into()));
    }
    let scored = database
        .iter()
        .map(|(id, e)| Ok((id.clone(), cosine_similarity(query, e)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(rank(scored, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashEncoder;
    use crate::fact_rule::{ChainOwner, NodeKind};
    use crate::llm::ScriptedLlm;
    use crate::neural::DenseLayer;
    use rand::Rng;

    fn ev(v: Vec<f64>) -> EmbeddingVector {
        EmbeddingVector::new(v).unwrap()
    }

    fn fv(l: &[f64], s: &[f64]) -> FeatureVector {
        FeatureVector::new(ev(l.to_vec()), ev(s.to_vec())).unwrap()
    }

    fn graph() -> FactRuleGraph {
        let mut g = FactRuleGraph::new();
        g.add_node("a", NodeKind::Fact, "traffic stop").unwrap();
        g.add_node("b", NodeKind::Rule, "Fourth Amendment").unwrap();
        g.add_edge("a", "b").unwrap();
        g
    }

    #[test]
    fn features_and_ablation() {
        let g = graph();
        let enc = HashEncoder::new(16, 0);
        let chain = FactRuleChain::new(vec!["a".into(), "b".into()], ChainOwner::Predicted);
        let f = build_features("Was the stop legal?", &chain, &g, &enc, Ablation::None).unwrap();
        assert_eq!(f.combined().len(), 32);
        assert!(f.logical.norm() > 0.0 && f.semantic.norm() > 0.0);
        assert_eq!(f, build_features("Was the stop legal?", &chain, &g, &enc, Ablation::None).unwrap());
        let nl = build_features("Was the stop legal?", &chain, &g, &enc, Ablation::NoLogical).unwrap();
        assert!(nl.combined()[..16].iter().all(|v| *v == 0.0));
        assert_eq!(nl.semantic, f.semantic);
        let ns = build_features("Was the stop legal?", &chain, &g, &enc, Ablation::NoSemantic).unwrap();
        assert!(ns.combined()[16..].iter().all(|v| *v == 0.0));
        assert_eq!(ns.dim(), f.dim());
        assert!(build_features("  ", &chain, &g, &enc, Ablation::None).is_err());
    }

    fn constant_model(feature_dim: usize, out_bias: f64) -> DssmModel {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = DssmModel::new(feature_dim, &[3, 3, 2], &mut rng);
        for layer in &mut model.mlp.layers {
            layer.weights.iter_mut().for_each(|w| *w = 0.0);
            layer.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        model.mlp.layers[3].bias[0] = out_bias;
        model
    }

    #[test]
    fn constant_network_scores_bias() {
        let model = constant_model(4, 0.7);
        let q = fv(&[1.0, 2.0], &[3.0, 4.0]);
        let c = fv(&[-1.0, 0.5], &[0.0, 9.0]);
        assert_eq!(score_pair(&q, &c, &model).unwrap(), 0.7);
        let wrong = fv(&[1.0], &[1.0]);
        assert!(score_pair(&q, &wrong, &model).is_err());
    }

    #[test]
    fn score_is_asymmetric() {
        // first layer reads only the query's first entry
        let mut rows = vec![vec![0.0; 8]; 1];
        rows[0][0] = 1.0;
        let layers = vec![
            DenseLayer::from_rows(&rows.iter().map(Vec::as_slice).collect::<Vec<_>>(), &[0.0]),
            DenseLayer::from_rows(&[&[1.0]], &[0.0]),
            DenseLayer::from_rows(&[&[1.0]], &[0.0]),
            DenseLayer::from_rows(&[&[1.0]], &[0.0]),
        ];
        let model = DssmModel::from_mlp(Mlp::from_layers(layers, OutputActivation::Identity).unwrap()).unwrap();
        let q = fv(&[1.0, 0.0], &[0.0, 0.0]);
        let c = fv(&[0.0, 0.0], &[0.0, 1.0]);
        let forward = score_pair(&q, &c, &model).unwrap();
        let backward = score_pair(&c, &q, &model).unwrap();
        assert!((forward - 1f64.tanh().tanh().tanh()).abs() < 1e-15);
        assert_eq!(backward, 0.0);
    }

    #[test]
    fn margin_loss_examples() {
        assert_eq!(margin_loss(0.3, 0.3, 1.0), 1.0);
        assert_eq!(margin_loss(3.0, 1.0, 1.0), 0.0);
        assert_eq!(margin_loss(0.0, 0.5, 1.0), 1.5);
    }

    #[test]
    fn triplet_gradient_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let d = 3;
            let mut model = DssmModel::new(2 * d, &[5, 4, 3], &mut rng);
            let rand_fv = |rng: &mut ChaCha8Rng| {
                let l: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let s: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                fv(&l, &s)
            };
            let (q, p, n) = (rand_fv(&mut rng), rand_fv(&mut rng), rand_fv(&mut rng));
            // large alpha keeps the hinge active
            let alpha = 10.0;
            let (_, grads) = triplet_loss_and_grad(&model, &q, &p, &n, alpha).unwrap();
            let g = grads.flat();
            let h = 1e-3;
            for i in 0..model.mlp.param_count() {
                let orig = model.mlp.param(i);
                model.mlp.set_param(i, orig + h);
                let up = triplet_loss_and_grad(&model, &q, &p, &n, alpha).unwrap().0;
                model.mlp.set_param(i, orig - h);
                let down = triplet_loss_and_grad(&model, &q, &p, &n, alpha).unwrap().0;
                model.mlp.set_param(i, orig);
                let numeric = (up - down) / (2.0 * h);
                let err = (numeric - g[i]).abs() / numeric.abs().max(g[i].abs()).max(1e-6);
                assert!(err <= 1e-4, "param {i}: {} vs {numeric}", g[i]);
            }
        }
    }

    #[test]
    fn satisfied_margin_has_zero_gradient() {
        let model = constant_model(2, 0.0);
        let f = fv(&[1.0], &[1.0]);
        let (loss, grads) = triplet_loss_and_grad(&model, &f, &f, &f, 0.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.is_zero());
    }

    #[test]
    fn relevance_parsing() {
        assert_eq!(parse_relevance("5"), Some(5));
        assert_eq!(parse_relevance("Score: 3 because the events match"), Some(3));
        assert_eq!(parse_relevance("Question2 vs 12 ... 4"), Some(2));
        assert_eq!(parse_relevance("seven"), None);
        assert_eq!(parse_relevance("17 and 9"), None);
    }

    #[test]
    fn annotate_with_retries() {
        let q = QaPair::new("q", "Was my car searched legally?", "a");
        let c = QaPair::new("c", "Police searched my car.", "b");
        let settings = RelevanceSettings {
            retry: RetryPolicy::immediate(3),
            ..RelevanceSettings::default()
        };
        let llm = ScriptedLlm::responses(["5"]);
        assert_eq!(annotate_relevance(&q, &c, &llm, &settings).unwrap().score, 5);
        let prompt = &llm.prompts()[0];
        assert!(prompt.starts_with(RELEVANCE_INSTRUCTION));
        assert!(prompt.contains("Question1:\nWas my car searched legally?"));
        let llm = ScriptedLlm::responses(["hmm", "Score: 3 because"]);
        assert_eq!(annotate_relevance(&q, &c, &llm, &settings).unwrap().score, 3);
        let llm = ScriptedLlm::responses(["seven", "seven", "seven"]);
        assert!(matches!(
            annotate_relevance(&q, &c, &llm, &settings),
            Err(LsimError::RetriesExhausted { attempts: 3, .. })
        ));
    }

    fn j(q: &str, c: &str, s: u8) -> RelevanceJudgment {
        RelevanceJudgment {
            query_id: q.into(),
            candidate_id: c.into(),
            score: s,
        }
    }

    #[test]
    fn triplet_rules() {
        let (t, w) = build_triplets(&[j("q", "a", 5), j("q", "b", 0), j("q", "c", 3)]).unwrap();
        assert_eq!(t, vec![TripletExample { query_id: "q".into(), positive_id: "a".into(), negative_id: "b".into() }]);
        assert!(w.is_empty());
        let (t, w) = build_triplets(&[j("q", "b", 4), j("q", "a", 4)]).unwrap();
        assert!(t.is_empty());
        assert_eq!(w.len(), 1);
        let (t, _) = build_triplets(&[j("q", "b", 2), j("q", "a", 2), j("q", "c", 1)]).unwrap();
        assert_eq!((t[0].positive_id.as_str(), t[0].negative_id.as_str()), ("a", "c"));
        assert!(build_triplets(&[j("q", "a", 1)]).is_err());
    }

    #[test]
    fn pool_excludes_self_and_orders() {
        let db = vec![
            ("x".to_string(), ev(vec![1.0, 0.0])),
            ("y".to_string(), ev(vec![0.0, 1.0])),
            ("w".to_string(), ev(vec![1.0, 0.0])),
            ("q".to_string(), ev(vec![1.0, 0.1])),
        ];
        let pool = candidate_pool("q", &ev(vec![1.0, 0.1]), &db, 2).unwrap();
        assert_eq!(pool, vec!["w", "x"]);
    }

    #[test]
    fn retrieval_matches_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = DssmModel::new(4, &[6, 5, 4], &mut rng);
        let db: Vec<(String, FeatureVector)> = (0..10)
            .map(|i| {
                let l: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let s: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
                (format!("c{i}"), fv(&l, &s))
            })
            .collect();
        let q = fv(&[0.2, -0.4], &[0.9, 0.1]);
        let got = retrieve_topk(&q, &db, &model, 3).unwrap();
        let mut all: Vec<(f64, String)> = db.iter().map(|(id, f)| (score_pair(&q, f, &model).unwrap(), id.clone())).collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let want: Vec<String> = all.into_iter().take(3).map(|x| x.1).collect();
        assert_eq!(got.iter().map(|r| r.candidate_id.clone()).collect::<Vec<_>>(), want);
        assert_eq!(got.iter().map(|r| r.rank).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(retrieve_topk(&q, &db[..2], &model, 5).unwrap().len(), 2);
        assert!(retrieve_topk(&q, &[], &model, 3).is_err());
    }

    #[test]
    fn constant_network_ties_by_id() {
        let model = constant_model(2, 0.0);
        let db: Vec<(String, FeatureVector)> = ["d", "b", "c", "a"].iter().map(|id| (id.to_string(), fv(&[1.0], &[0.0]))).collect();
        let got = retrieve_topk(&fv(&[1.0], &[1.0]), &db, &model, 3).unwrap();
        assert_eq!(got.iter().map(|r| r.candidate_id.as_str()).collect::<Vec<_>>(), vec!["a", "b", "c"]);
    }

    #[test]
    fn training_noop_and_determinism() {
        let mut feats = HashMap::new();
        feats.insert("q".to_string(), fv(&[1.0, 0.0], &[0.0, 1.0]));
        feats.insert("p".to_string(), fv(&[1.0, 0.0], &[0.0, 0.9]));
        feats.insert("n".to_string(), fv(&[-1.0, 0.0], &[0.5, 0.0]));
        let t = vec![TripletExample { query_id: "q".into(), positive_id: "p".into(), negative_id: "n".into() }];
        let cfg = DssmConfig { epochs: 0, hidden_widths: vec![4, 3, 2], seed: 5, ..DssmConfig::default() };
        let init = DssmModel::new(4, &[4, 3, 2], &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(train_dssm(&t, &feats, &cfg).unwrap().model, init);
        let cfg = DssmConfig { epochs: 4, learning_rate: 1e-2, ..cfg };
        let a = train_dssm(&t, &feats, &cfg).unwrap();
        let b = train_dssm(&t, &feats, &cfg).unwrap();
        assert_eq!(crate::neural::checkpoint_bytes(&a.model.mlp, None), crate::neural::checkpoint_bytes(&b.model.mlp, None));
        assert_eq!(a.history.len(), 4);
        assert!(train_dssm(&[], &feats, &cfg).is_err());
        let missing = vec![TripletExample { query_id: "q".into(), positive_id: "zz".into(), negative_id: "n".into() }];
        assert!(train_dssm(&missing, &feats, &cfg).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let model = DssmModel::new(4, &[3, 3, 2], &mut ChaCha8Rng::seed_from_u64(1));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("dssm.ckpt");
        model.save(&p).unwrap();
        assert_eq!(DssmModel::load(&p).unwrap(), model);
    }

    #[test]
    fn ablation_parse() {
        assert_eq!("no_logical".parse::<Ablation>().unwrap(), Ablation::NoLogical);
        assert_eq!("no-semantic".parse::<Ablation>().unwrap(), Ablation::NoSemantic);
        assert!("bogus".parse::<Ablation>().is_err());
    }
}
