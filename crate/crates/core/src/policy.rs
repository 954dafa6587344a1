//! Chain prediction as a sequential decision process trained with REINFORCE.
//!
//! The state is the encoding of the serialized current chain. At each step
//! the policy scores the candidate nodes, one is appended, and the chain is
//! re-encoded. A step earns reward 1 when the chosen node belongs to the
//! answer chain.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingVector, TextEncoder};
use crate::error::{LsimError, Result};
use crate::fact_rule::{serialize_chain, ChainOwner, FactRuleChain, FactRuleGraph};
use crate::neural::{adam_step, load_checkpoint, save_checkpoint, softmax, AdamState, Mlp, MlpGradients, OutputActivation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    /// Unvisited neighbors of any node already in the chain.
    Neighbors,
    AllUnvisited,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyHead {
    /// mlp(state ++ label embedding) -> one logit, shared across candidates.
    Candidate,
    /// mlp(state) -> one logit per graph node, masked to the candidates.
    FixedOutput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CreditAssignment {
    ReturnToGo,
    TotalReturn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutMode {
    Sample,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub max_steps: usize,
    pub inference_steps: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub hidden_widths: Vec<usize>,
    pub action_mode: ActionMode,
    pub head: PolicyHead,
    pub credit: CreditAssignment,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            max_steps: 4,
            inference_steps: 4,
            learning_rate: 1e-4,
            epochs: 30,
            hidden_widths: vec![256, 128],
            action_mode: ActionMode::Neighbors,
            head: PolicyHead::Candidate,
            credit: CreditAssignment::ReturnToGo,
            seed: 0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(LsimError::Config("policy max_steps must be at least 1".into()));
        }
        if self.inference_steps == 0 || self.inference_steps > self.max_steps {
            return Err(LsimError::Config(format!(
                "policy inference_steps must lie in 1..={}",
                self.max_steps
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(LsimError::Config("policy learning_rate must be positive".into()));
        }
        if self.hidden_widths.contains(&0) {
            return Err(LsimError::Config("policy hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// One trajectory. `candidates[t]` is the action set the choice at step `t`
/// was made from, kept so the update can recompute the distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub states: Vec<EmbeddingVector>,
    pub candidates: Vec<Vec<String>>,
    pub actions: Vec<String>,
    pub action_log_probs: Vec<f64>,
    pub rewards: Vec<u8>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.iter().map(|&r| r as f64).sum()
    }

    fn check(&self) -> Result<()> {
        let n = self.actions.len();
        if [self.states.len(), self.candidates.len(), self.action_log_probs.len(), self.rewards.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(LsimError::ShapeMismatch("episode lists differ in length".into()));
        }
        if self.rewards.iter().any(|&r| r > 1) {
            return Err(LsimError::InvalidInput("episode reward outside {0, 1}".into()));
        }
        for (a, cands) in self.actions.iter().zip(&self.candidates) {
            if !cands.contains(a) {
                return Err(LsimError::InvalidInput(format!("action `{a}` not among its candidates")));
            }
        }
        Ok(())
    }

    /// Per-step weights G_t.
    pub fn credits(&self, credit: CreditAssignment) -> Vec<f64> {
        let total = self.total_return();
        match credit {
            CreditAssignment::TotalReturn => vec![total; self.len()],
            CreditAssignment::ReturnToGo => {
                let mut acc = 0.0;
                let mut g: Vec<f64> = self
                    .rewards
                    .iter()
                    .rev()
                    .map(|&r| {
                        acc += r as f64;
                        acc
                    })
                    .collect();
                g.reverse();
                g
            }
        }
    }
}

/// Graph, encoder and cached node-label embeddings shared by rollouts.
pub struct PolicyContext<'a> {
    pub graph: &'a FactRuleGraph,
    pub encoder: &'a dyn TextEncoder,
    labels: BTreeMap<String, EmbeddingVector>,
    node_index: BTreeMap<String, usize>,
}

impl<'a> PolicyContext<'a> {
    pub fn new(graph: &'a FactRuleGraph, encoder: &'a dyn TextEncoder) -> Result<Self> {
        let mut labels = BTreeMap::new();
        let mut node_index = BTreeMap::new();
        for (i, node) in graph.nodes().enumerate() {
            labels.insert(node.id.clone(), encoder.encode(&node.label)?);
            node_index.insert(node.id.clone(), i);
        }
        Ok(Self {
            graph,
            encoder,
            labels,
            node_index,
        })
    }

    pub fn encode_chain(&self, chain: &FactRuleChain) -> Result<EmbeddingVector> {
        self.encoder.encode(&serialize_chain(chain, self.graph)?)
    }

    fn label(&self, id: &str) -> Result<&EmbeddingVector> {
        self.labels.get(id).ok_or_else(|| LsimError::UnknownNode(id.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    pub mlp: Mlp,
    pub head: PolicyHead,
}

impl PolicyModel {
    pub fn new<R: Rng + ?Sized>(ctx: &PolicyContext<'_>, config: &PolicyConfig, rng: &mut R) -> Self {
        let dim = ctx.encoder.dim();
        let (input, output) = match config.head {
            PolicyHead::Candidate => (2 * dim, 1),
            PolicyHead::FixedOutput => (dim, ctx.graph.len()),
        };
        let mut dims = vec![input];
        dims.extend(&config.hidden_widths);
        dims.push(output);
        Self {
            mlp: Mlp::new(&dims, OutputActivation::Identity, rng),
            head: config.head,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.mlp, None)
    }

    /// Loads a checkpoint and checks it fits the encoder and graph.
    pub fn load(path: impl AsRef<Path>, ctx: &PolicyContext<'_>, head: PolicyHead) -> Result<Self> {
        let (mlp, _) = load_checkpoint(path)?;
        let dim = ctx.encoder.dim();
        let (input, output) = match head {
            PolicyHead::Candidate => (2 * dim, 1),
            PolicyHead::FixedOutput => (dim, ctx.graph.len()),
        };
        if mlp.input_dim() != input || mlp.output_dim() != output {
            return Err(LsimError::Checkpoint(format!(
                "policy checkpoint is {}->{}, expected {input}->{output}",
                mlp.input_dim(),
                mlp.output_dim()
            )));
        }
        Ok(Self { mlp, head })
    }

    /// Logits over `candidates` in the given order.
    pub fn logits(&self, ctx: &PolicyContext<'_>, state: &EmbeddingVector, candidates: &[String]) -> Result<Vec<f64>> {
        match self.head {
            PolicyHead::Candidate => candidates
                .iter()
                .map(|c| Ok(self.mlp.forward(&candidate_input(ctx, state, c)?)?.0[0]))
                .collect(),
            PolicyHead::FixedOutput => {
                let (all, _) = self.mlp.forward(state.values())?;
                candidates.iter().map(|c| Ok(all[node_slot(ctx, c)?])).collect()
            }
        }
    }

    pub fn distribution(&self, ctx: &PolicyContext<'_>, state: &EmbeddingVector, candidates: &[String]) -> Result<Vec<f64>> {
        if candidates.is_empty() {
            return Err(LsimError::InvalidInput("policy over an empty candidate set".into()));
        }
        softmax(&self.logits(ctx, state, candidates)?)
    }

    /// Adds `scale * d(sum_c w_c * logit_c)/dθ` to `grads`.
    fn accumulate_logit_grads(
        &self,
        ctx: &PolicyContext<'_>,
        state: &EmbeddingVector,
        candidates: &[String],
        weights: &[f64],
        grads: &mut MlpGradients,
    ) -> Result<()> {
        match self.head {
            PolicyHead::Candidate => {
                for (c, &w) in candidates.iter().zip(weights) {
                    if w == 0.0 {
                        continue;
                    }
                    let (_, cache) = self.mlp.forward(&candidate_input(ctx, state, c)?)?;
                    grads.add_scaled(&self.mlp.backward(&cache, &[w])?, 1.0);
                }
            }
            PolicyHead::FixedOutput => {
                let (_, cache) = self.mlp.forward(state.values())?;
                let mut out = vec![0.0; self.mlp.output_dim()];
                for (c, &w) in candidates.iter().zip(weights) {
                    out[node_slot(ctx, c)?] += w;
                }
                grads.add_scaled(&self.mlp.backward(&cache, &out)?, 1.0);
            }
        }
        Ok(())
    }
}

fn candidate_input(ctx: &PolicyContext<'_>, state: &EmbeddingVector, id: &str) -> Result<Vec<f64>> {
    let mut x = Vec::with_capacity(2 * state.dim());
    x.extend_from_slice(state.values());
    x.extend_from_slice(ctx.label(id)?.values());
    Ok(x)
}

fn node_slot(ctx: &PolicyContext<'_>, id: &str) -> Result<usize> {
    ctx.node_index.get(id).copied().ok_or_else(|| LsimError::UnknownNode(id.to_string()))
}

/// Valid next nodes, sorted by id. Empty means the rollout stops.
pub fn candidate_actions(chain: &FactRuleChain, graph: &FactRuleGraph, mode: ActionMode) -> Vec<String> {
    match mode {
        ActionMode::AllUnvisited => graph.node_ids().filter(|id| !chain.contains(id)).cloned().collect(),
        ActionMode::Neighbors => {
            let mut out: Vec<String> = chain
                .node_ids
                .iter()
                .flat_map(|id| graph.neighbors(id))
                .filter(|n| !chain.contains(n))
                .cloned()
                .collect();
            out.sort();
            out.dedup();
            out
        }
    }
}

/// Picks one candidate. Greedy ties go to the earliest candidate, which is
/// the smallest id when candidates come from [`candidate_actions`].
pub fn policy_step<R: Rng + ?Sized>(
    state: &EmbeddingVector,
    candidates: &[String],
    model: &PolicyModel,
    ctx: &PolicyContext<'_>,
    mode: RolloutMode,
    rng: &mut R,
) -> Result<(String, f64)> {
    let probs = model.distribution(ctx, state, candidates)?;
    let idx = match mode {
        RolloutMode::Greedy => {
            let mut best = 0;
            for (i, p) in probs.iter().enumerate() {
                if *p > probs[best] {
                    best = i;
                }
            }
            best
        }
        RolloutMode::Sample => {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        }
    };
    Ok((candidates[idx].clone(), probs[idx].ln()))
}

pub fn reward(node: &str, answer_chain: &FactRuleChain) -> u8 {
    u8::from(answer_chain.contains(node))
}

/// Extends `question_chain` by up to `steps` nodes. Rewards are scored
/// against `answer_chain` when given, else left at zero.
#[allow(clippy::too_many_arguments)]
pub fn rollout<R: Rng + ?Sized>(
    question_chain: &FactRuleChain,
    answer_chain: Option<&FactRuleChain>,
    model: &PolicyModel,
    ctx: &PolicyContext<'_>,
    action_mode: ActionMode,
    steps: usize,
    mode: RolloutMode,
    rng: &mut R,
) -> Result<(FactRuleChain, Episode)> {
    question_chain.validate(ctx.graph)?;
    let mut chain = FactRuleChain::new(question_chain.node_ids.clone(), ChainOwner::Predicted);
    let mut episode = Episode {
        states: Vec::new(),
        candidates: Vec::new(),
        actions: Vec::new(),
        action_log_probs: Vec::new(),
        rewards: Vec::new(),
    };
    let mut state = ctx.encode_chain(&chain)?;
    for _ in 0..steps {
        let candidates = candidate_actions(&chain, ctx.graph, action_mode);
        if candidates.is_empty() {
            break;
        }
        let (choice, log_prob) = policy_step(&state, &candidates, model, ctx, mode, rng)?;
        episode.rewards.push(answer_chain.map_or(0, |a| reward(&choice, a)));
        episode.states.push(state);
        episode.candidates.push(candidates);
        episode.actions.push(choice.clone());
        episode.action_log_probs.push(log_prob);
        chain.node_ids.push(choice);
        state = ctx.encode_chain(&chain)?;
    }
    Ok((chain, episode))
}

/// -Σ_t G_t ln π(n_t | s_t) under the current parameters.
pub fn surrogate_loss(episode: &Episode, model: &PolicyModel, ctx: &PolicyContext<'_>, credit: CreditAssignment) -> Result<f64> {
    episode.check()?;
    let mut loss = 0.0;
    for (t, g) in episode.credits(credit).into_iter().enumerate() {
        let cands = &episode.candidates[t];
        let probs = model.distribution(ctx, &episode.states[t], cands)?;
        let i = cands.iter().position(|c| *c == episode.actions[t]).expect("checked");
        loss -= g * probs[i].ln();
    }
    Ok(loss)
}

/// Analytic gradient of [`surrogate_loss`]. Per step, d/dlogit_c is
/// G_t (p_c - [c = n_t]).
pub fn surrogate_gradient(
    episode: &Episode,
    model: &PolicyModel,
    ctx: &PolicyContext<'_>,
    credit: CreditAssignment,
) -> Result<MlpGradients> {
    episode.check()?;
    let mut grads = MlpGradients::zeros_like(&model.mlp);
    for (t, g) in episode.credits(credit).into_iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let cands = &episode.candidates[t];
        let probs = model.distribution(ctx, &episode.states[t], cands)?;
        let weights: Vec<f64> = cands
            .iter()
            .zip(&probs)
            .map(|(c, p)| g * (p - if *c == episode.actions[t] { 1.0 } else { 0.0 }))
            .collect();
        model.accumulate_logit_grads(ctx, &episode.states[t], cands, &weights, &mut grads)?;
    }
    Ok(grads)
}

/// One Adam step on the surrogate loss; returns the episode return. A zero
/// gradient leaves the parameters and optimizer state untouched.
pub fn reinforce_update(
    episode: &Episode,
    model: &mut PolicyModel,
    ctx: &PolicyContext<'_>,
    adam: &mut AdamState,
    learning_rate: f64,
    credit: CreditAssignment,
) -> Result<f64> {
    if episode.is_empty() {
        return Err(LsimError::InvalidInput("reinforce update on an empty episode".into()));
    }
    let grads = surrogate_gradient(episode, model, ctx, credit)?;
    if !grads.is_zero() {
        adam_step(&mut model.mlp, &grads, adam, learning_rate)?;
    }
    Ok(episode.total_return())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyEpochLog {
    pub epoch: usize,
    pub mean_return: f64,
}

#[derive(Debug, Clone)]
pub struct PolicyTraining {
    pub model: PolicyModel,
    pub history: Vec<PolicyEpochLog>,
}

/// `config.epochs` passes over `train`, one sampled rollout and update per
/// pair. Pairs whose rollout cannot move (no candidates) count as return 0.
pub fn train_policy(
    train: &[(FactRuleChain, FactRuleChain)],
    ctx: &PolicyContext<'_>,
    config: &PolicyConfig,
) -> Result<PolicyTraining> {
    config.validate()?;
    if train.is_empty() {
        return Err(LsimError::InvalidInput("policy training needs at least one pair".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = PolicyModel::new(ctx, config, &mut rng);
    let mut adam = AdamState::new(&model.mlp);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut total = 0.0;
        for (question, answer) in train {
            let (_, episode) = rollout(
                question,
                Some(answer),
                &model,
                ctx,
                config.action_mode,
                config.max_steps,
                RolloutMode::Sample,
                &mut rng,
            )?;
            if !episode.is_empty() {
                total += reinforce_update(&episode, &mut model, ctx, &mut adam, config.learning_rate, config.credit)?;
            }
        }
        let mean_return = total / train.len() as f64;
        log::info!("policy epoch {epoch}: mean return {mean_return:.4}");
        history.push(PolicyEpochLog { epoch, mean_return });
    }
    Ok(PolicyTraining { model, history })
}

/// Greedy rollout of at most `steps` nodes; the result holds the question
/// nodes followed by the predicted ones. `steps == 0` returns the question
/// chain relabelled as predicted.
pub fn predict_chain(
    question_chain: &FactRuleChain,
    model: &PolicyModel,
    ctx: &PolicyContext<'_>,
    action_mode: ActionMode,
    steps: usize,
) -> Result<FactRuleChain> {
    // greedy never draws from the rng
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (chain, _) = rollout(question_chain, None, model, ctx, action_mode, steps, RolloutMode::Greedy, &mut rng)?;
    Ok(chain)
}

/// Fraction of answer-chain nodes that greedy rollouts append, pooled over
/// all pairs.
pub fn answer_recovery(
    pairs: &[(FactRuleChain, FactRuleChain)],
    model: &PolicyModel,
    ctx: &PolicyContext<'_>,
    action_mode: ActionMode,
    steps: usize,
) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for (q, a) in pairs {
        let predicted = predict_chain(q, model, ctx, action_mode, steps)?;
        let appended = &predicted.node_ids[q.len()..];
        hit += a.node_ids.iter().filter(|n| appended.contains(n)).count();
        total += a.len();
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}
