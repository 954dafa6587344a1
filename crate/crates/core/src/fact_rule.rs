//! Fact-rule graphs and the chains read off them.
//!
//! A graph holds fact nodes (case circumstances such as "illegal search") and
//! rule nodes (legal bases such as "Fourth Amendment") joined by undirected
//! edges. A chain is an ordered path of one to four nodes. Predicted chains,
//! which extend a question chain with policy-selected nodes, may hold up to
//! eight nodes and need not be paths.
//!
//! Graph files are line-delimited JSON: every node line precedes every edge
//! line.
//!
//! ```text
//! {"type":"node","id":"n00000","kind":"fact","label":"illegal search"}
//! {"type":"edge","a":"n00000","b":"n00001"}
//! ```

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::QaPair;
use crate::embedding::{cosine_similarity, EmbeddingVector, TextEncoder};
use crate::error::{LsimError, Result};
use crate::llm::{complete_with_retry, GenerationConfig, LlmClient, RetryPolicy};

pub const MAX_CHAIN_LEN: usize = 4;
pub const MAX_PREDICTED_CHAIN_LEN: usize = 8;

pub const GRAPH_INSTRUCTION: &str = "Identify the key facts (specific circumstances of the case) and legal rules (applicable legal bases) in the following legal question and answer, and how they are connected.";

pub const DEFAULT_GRAPH_TEMPLATE: &str = "Identify the key facts (specific circumstances of the case) and legal rules (applicable legal bases) in the following legal question and answer, and how they are connected.
Respond with one item per line, using exactly these forms:
NODE fact: <label>
NODE rule: <label>
EDGE <label> | <label>

Question:
{question}

Answer:
{answer}
";

pub const CHAIN_INSTRUCTION: &str = "Please select 1 to 4 nodes from the provided graph that are most relevant to the legal question/answer. Ensure that the selected nodes are interconnected.";

pub const DEFAULT_CHAIN_TEMPLATE: &str = "Please select 1 to 4 nodes from the provided graph that are most relevant to the legal question/answer. Ensure that the selected nodes are interconnected.
Respond with the labels of the selected nodes, one per line, in reasoning order.

Graph nodes:
{nodes}

Graph edges:
{edges}

Legal text:
{text}
";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Fact,
    Rule,
}

impl NodeKind {
    pub fn tag(self) -> &'static str {
        match self {
            NodeKind::Fact => "[fact]",
            NodeKind::Rule => "[rule]",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fact" => Some(NodeKind::Fact),
            "rule" => Some(NodeKind::Rule),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactRuleNode {
    pub id: String,
    pub kind: NodeKind,
    pub label: String,
}

/// Case-insensitive, whitespace-collapsed form used to deduplicate labels.
pub fn label_key(label: &str) -> String {
    label.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FactRuleGraph {
    nodes: BTreeMap<String, FactRuleNode>,
    adjacency: BTreeMap<String, BTreeSet<String>>,
    by_label: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum GraphLine {
    Node(FactRuleNode),
    Edge { a: String, b: String },
}

impl FactRuleGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, id: impl Into<String>, kind: NodeKind, label: impl Into<String>) -> Result<()> {
        let id = id.into();
        let label = label.into();
        if id.is_empty() || label.trim().is_empty() {
            return Err(LsimError::InvalidInput("node id and label must be nonempty".into()));
        }
        if self.nodes.contains_key(&id) {
            return Err(LsimError::InvalidInput(format!("duplicate node id `{id}`")));
        }
        let key = label_key(&label);
        if self.by_label.contains_key(&key) {
            return Err(LsimError::InvalidInput(format!("duplicate node label `{label}`")));
        }
        self.by_label.insert(key, id.clone());
        self.adjacency.insert(id.clone(), BTreeSet::new());
        self.nodes.insert(id.clone(), FactRuleNode { id, kind, label });
        Ok(())
    }

    pub fn add_edge(&mut self, a: &str, b: &str) -> Result<()> {
        if a == b {
            return Err(LsimError::InvalidInput(format!("self-loop on `{a}`")));
        }
        for id in [a, b] {
            if !self.nodes.contains_key(id) {
                return Err(LsimError::UnknownNode(id.to_string()));
            }
        }
        self.adjacency.get_mut(a).expect("checked").insert(b.to_string());
        self.adjacency.get_mut(b).expect("checked").insert(a.to_string());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn node(&self, id: &str) -> Option<&FactRuleNode> {
        self.nodes.get(id)
    }

    /// Nodes in id order.
    pub fn nodes(&self) -> impl Iterator<Item = &FactRuleNode> {
        self.nodes.values()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &String> {
        self.nodes.keys()
    }

    pub fn neighbors(&self, id: &str) -> impl Iterator<Item = &String> {
        self.adjacency.get(id).into_iter().flatten()
    }

    pub fn adjacent(&self, a: &str, b: &str) -> bool {
        self.adjacency.get(a).is_some_and(|n| n.contains(b))
    }

    /// Undirected edges as `(smaller id, larger id)`, sorted.
    pub fn edges(&self) -> Vec<(String, String)> {
        self.adjacency
            .iter()
            .flat_map(|(a, ns)| ns.iter().filter(move |b| a < *b).map(move |b| (a.clone(), b.clone())))
            .collect()
    }

    pub fn find_by_label(&self, label: &str) -> Option<&String> {
        self.by_label.get(&label_key(label))
    }

    /// Shortest path from `from` to `to` not passing through `avoid`; the
    /// returned list excludes `from` and ends with `to`. Neighbors are
    /// expanded in id order, so the result is deterministic.
    pub fn shortest_path(&self, from: &str, to: &str, avoid: &BTreeSet<String>) -> Option<Vec<String>> {
        let mut parent: BTreeMap<&str, &str> = BTreeMap::new();
        let mut queue = VecDeque::from([from]);
        let mut visited: BTreeSet<&str> = BTreeSet::from([from]);
        while let Some(cur) = queue.pop_front() {
            if cur == to {
                let mut path = vec![to.to_string()];
                let mut at = to;
                while let Some(&p) = parent.get(at) {
                    if p == from {
                        break;
                    }
                    path.push(p.to_string());
                    at = p;
                }
                path.reverse();
                return Some(path);
            }
            for n in self.neighbors(cur) {
                if !visited.contains(n.as_str()) && (n == to || !avoid.contains(n)) {
                    visited.insert(n);
                    parent.insert(n, cur);
                    queue.push_back(n);
                }
            }
        }
        None
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        for node in self.nodes.values() {
            serde_json::to_writer(&mut out, &GraphLine::Node(node.clone()))?;
            out.write_all(b"\n")?;
        }
        for (a, b) in self.edges() {
            serde_json::to_writer(&mut out, &GraphLine::Edge { a, b })?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(LsimError::MissingArtifact(path.to_path_buf()));
        }
        let reader = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut graph = Self::new();
        let mut seen_edge = false;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |reason: String| LsimError::MalformedRecord {
                path: path.to_path_buf(),
                line: i + 1,
                reason,
            };
            match serde_json::from_str::<GraphLine>(&line).map_err(|e| malformed(e.to_string()))? {
                GraphLine::Node(n) => {
                    if seen_edge {
                        return Err(malformed("node listed after edges".into()));
                    }
                    graph.add_node(n.id, n.kind, n.label).map_err(|e| malformed(e.to_string()))?;
                }
                GraphLine::Edge { a, b } => {
                    seen_edge = true;
                    graph.add_edge(&a, &b).map_err(|e| malformed(e.to_string()))?;
                }
            }
        }
        Ok(graph)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainOwner {
    Question,
    Answer,
    Predicted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactRuleChain {
    pub node_ids: Vec<String>,
    pub owner: ChainOwner,
}

impl FactRuleChain {
    pub fn new(node_ids: Vec<String>, owner: ChainOwner) -> Self {
        Self { node_ids, owner }
    }

    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.node_ids.iter().any(|n| n == id)
    }

    /// Question and answer chains must be paths of 1..=4 distinct nodes.
    /// Predicted chains may hold up to 8 distinct nodes with no adjacency
    /// requirement.
    pub fn validate(&self, graph: &FactRuleGraph) -> Result<()> {
        let max = match self.owner {
            ChainOwner::Predicted => MAX_PREDICTED_CHAIN_LEN,
            _ => MAX_CHAIN_LEN,
        };
        if self.node_ids.is_empty() || self.node_ids.len() > max {
            return Err(LsimError::InvalidChain(format!(
                "length {} outside 1..={max}",
                self.node_ids.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for id in &self.node_ids {
            if !graph.contains(id) {
                return Err(LsimError::UnknownNode(id.clone()));
            }
            if !seen.insert(id) {
                return Err(LsimError::InvalidChain(format!("node `{id}` repeated")));
            }
        }
        if self.owner != ChainOwner::Predicted {
            if let Some(w) = self.node_ids.windows(2).find(|w| !graph.adjacent(&w[0], &w[1])) {
                return Err(LsimError::InvalidChain(format!("`{}` and `{}` are not adjacent", w[0], w[1])));
            }
        }
        Ok(())
    }
}

impl fmt::Display for FactRuleChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.node_ids.join(" -> "))
    }
}

/// `[fact] illegal search -> [rule] Fourth Amendment`
pub fn serialize_chain(chain: &FactRuleChain, graph: &FactRuleGraph) -> Result<String> {
    let parts = chain
        .node_ids
        .iter()
        .map(|id| {
            graph
                .node(id)
                .map(|n| format!("{} {}", n.kind.tag(), n.label))
                .ok_or_else(|| LsimError::UnknownNode(id.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.join(" -> "))
}

/// Precomputed label embeddings for repeated nearest-node lookups.
pub struct LabelIndex<'a> {
    graph: &'a FactRuleGraph,
    encoder: &'a dyn TextEncoder,
    embeddings: Vec<(String, EmbeddingVector)>,
}

impl<'a> LabelIndex<'a> {
    pub fn new(graph: &'a FactRuleGraph, encoder: &'a dyn TextEncoder) -> Result<Self> {
        let embeddings = graph
            .nodes()
            .map(|n| Ok((n.id.clone(), encoder.encode(&n.label)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            graph,
            encoder,
            embeddings,
        })
    }

    /// Exact (case-insensitive) label match, else the node whose label
    /// embedding has the highest cosine with `label`; ties go to the smallest id.
    pub fn nearest(&self, label: &str) -> Result<String> {
        if self.graph.is_empty() {
            return Err(LsimError::InvalidInput("nearest node in an empty graph".into()));
        }
        if let Some(id) = self.graph.find_by_label(label) {
            return Ok(id.clone());
        }
        let query = self.encoder.encode(label)?;
        let mut best: Option<(&String, f64)> = None;
        for (id, emb) in &self.embeddings {
            let sim = cosine_similarity(&query, emb).unwrap_or(f64::NEG_INFINITY);
            if best.is_none_or(|(_, b)| sim > b) {
                best = Some((id, sim));
            }
        }
        Ok(best.expect("graph nonempty").0.clone())
    }
}

pub fn nearest_node(label: &str, graph: &FactRuleGraph, encoder: &dyn TextEncoder) -> Result<String> {
    if graph.is_empty() {
        return Err(LsimError::InvalidInput("nearest node in an empty graph".into()));
    }
    LabelIndex::new(graph, encoder)?.nearest(label)
}

/// Prompts, sampling settings and retry policy shared by graph construction
/// and chain extraction.
#[derive(Debug, Clone)]
pub struct ExtractionSettings {
    pub graph_template: String,
    pub chain_template: String,
    pub generation: GenerationConfig,
    pub retry: RetryPolicy,
}

impl Default for ExtractionSettings {
    fn default() -> Self {
        Self {
            graph_template: DEFAULT_GRAPH_TEMPLATE.to_string(),
            chain_template: DEFAULT_CHAIN_TEMPLATE.to_string(),
            generation: GenerationConfig::default(),
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GraphBuild {
    pub graph: FactRuleGraph,
    pub warnings: Vec<String>,
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn graph_prompt(pair: &QaPair, template: &str) -> String {
    template
        .replace("{question}", &one_line(&pair.question_text))
        .replace("{answer}", &one_line(&pair.answer_text))
}

enum GraphItem {
    Node(NodeKind, String),
    Edge(String, String),
}

fn parse_graph_reply(reply: &str, warnings: &mut Vec<String>) -> Vec<GraphItem> {
    let mut items = Vec::new();
    for line in reply.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if let Some(rest) = line.strip_prefix("NODE") {
            match rest.split_once(':') {
                Some((kind, label)) if NodeKind::parse(kind).is_some() && !label.trim().is_empty() => {
                    items.push(GraphItem::Node(NodeKind::parse(kind).expect("checked"), label.trim().to_string()))
                }
                _ => warnings.push(format!("unparseable node line `{line}`")),
            }
        } else if let Some(rest) = line.strip_prefix("EDGE") {
            match rest.split_once('|') {
                Some((a, b)) if !a.trim().is_empty() && !b.trim().is_empty() => {
                    items.push(GraphItem::Edge(a.trim().to_string(), b.trim().to_string()))
                }
                _ => warnings.push(format!("unparseable edge line `{line}`")),
            }
        } else {
            warnings.push(format!("ignored line `{line}`"));
        }
    }
    items
}

/// Prompts the llm once per pair for nodes and edges, then unions the answers
/// with case-insensitive label deduplication. Node ids are assigned in order
/// of first appearance (`n00000`, `n00001`, ...). Self-loops and edges naming
/// undeclared labels are dropped with a warning.
pub fn build_graph(pairs: &[QaPair], llm: &dyn LlmClient, settings: &ExtractionSettings) -> Result<GraphBuild> {
    if pairs.is_empty() {
        return Err(LsimError::InvalidInput("cannot build a graph from zero pairs".into()));
    }
    let mut graph = FactRuleGraph::new();
    let mut warnings = Vec::new();
    for pair in pairs {
        let prompt = graph_prompt(pair, &settings.graph_template);
        let reply = complete_with_retry(llm, &prompt, &settings.generation, &settings.retry)?.text;
        let mut local = Vec::new();
        let items = parse_graph_reply(&reply, &mut local);
        for item in &items {
            if let GraphItem::Node(kind, label) = item {
                match graph.find_by_label(label) {
                    Some(id) => {
                        let existing = graph.node(id).expect("indexed").kind;
                        if existing != *kind {
                            local.push(format!("label `{label}` seen as both fact and rule; keeping {existing:?}"));
                        }
                    }
                    None => {
                        let id = format!("n{:05}", graph.len());
                        graph.add_node(id, *kind, label.clone())?;
                    }
                }
            }
        }
        for item in &items {
            if let GraphItem::Edge(a, b) = item {
                match (graph.find_by_label(a).cloned(), graph.find_by_label(b).cloned()) {
                    (Some(x), Some(y)) if x == y => local.push(format!("dropped self-loop on `{a}`")),
                    (Some(x), Some(y)) => graph.add_edge(&x, &y)?,
                    _ => local.push(format!("dropped edge `{a}` | `{b}` with an undeclared endpoint")),
                }
            }
        }
        for w in local {
            log::warn!("graph build, pair {}: {w}", pair.id);
            warnings.push(format!("pair {}: {w}", pair.id));
        }
    }
    if graph.is_empty() {
        return Err(LsimError::Llm("no nodes extracted from any pair".into()));
    }
    Ok(GraphBuild { graph, warnings })
}

pub fn chain_prompt(text: &str, graph: &FactRuleGraph, template: &str) -> String {
    let nodes: Vec<String> = graph.nodes().map(|n| format!("- {} {}", n.kind.tag(), n.label)).collect();
    let edges: Vec<String> = graph
        .edges()
        .iter()
        .map(|(a, b)| {
            format!(
                "- {} -- {}",
                graph.node(a).expect("edge endpoint").label,
                graph.node(b).expect("edge endpoint").label
            )
        })
        .collect();
    template
        .replace("{nodes}", &nodes.join("\n"))
        .replace("{edges}", &if edges.is_empty() { "- (none)".to_string() } else { edges.join("\n") })
        .replace("{text}", &one_line(text))
}

fn clean_label(line: &str) -> String {
    let mut s = line.trim();
    s = s.trim_start_matches(|c: char| c == '-' || c == '*' || c.is_whitespace());
    // "1." / "2)" enumerations
    let digits = s.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 && s[digits..].starts_with(['.', ')']) {
        s = s[digits + 1..].trim_start();
    }
    for tag in [NodeKind::Fact.tag(), NodeKind::Rule.tag()] {
        if let Some(rest) = s.strip_prefix(tag) {
            s = rest.trim_start();
        }
    }
    s.trim_matches(|c: char| c == '"' || c == '\'' || c.is_whitespace()).to_string()
}

/// Resolved labels to a valid path: duplicates dropped, gaps bridged by a
/// shortest path when the result stays within four nodes, otherwise the
/// remaining nodes are dropped.
pub fn repair_chain(ids: &[String], graph: &FactRuleGraph, warnings: &mut Vec<String>) -> Vec<String> {
    let mut chain: Vec<String> = Vec::new();
    for id in ids {
        if chain.contains(id) {
            continue;
        }
        let Some(last) = chain.last().cloned() else {
            chain.push(id.clone());
            continue;
        };
        if graph.adjacent(&last, id) && chain.len() < MAX_CHAIN_LEN {
            chain.push(id.clone());
            continue;
        }
        let avoid: BTreeSet<String> = chain.iter().cloned().collect();
        match graph.shortest_path(&last, id, &avoid) {
            Some(path) if chain.len() + path.len() <= MAX_CHAIN_LEN => {
                warnings.push(format!("bridged `{last}` to `{id}` through {} node(s)", path.len() - 1));
                chain.extend(path);
            }
            _ => {
                warnings.push(format!("dropped trailing nodes from `{id}` on: not connectable within {MAX_CHAIN_LEN}"));
                break;
            }
        }
    }
    chain
}

/// Asks the llm to pick 1..=4 nodes for `text` and turns the reply into a
/// valid chain.
pub fn extract_text_chain(
    text: &str,
    owner: ChainOwner,
    index: &LabelIndex<'_>,
    llm: &dyn LlmClient,
    settings: &ExtractionSettings,
    warnings: &mut Vec<String>,
) -> Result<FactRuleChain> {
    let graph = index.graph;
    if graph.is_empty() {
        return Err(LsimError::InvalidInput("chain extraction on an empty graph".into()));
    }
    let prompt = chain_prompt(text, graph, &settings.chain_template);
    let reply = complete_with_retry(llm, &prompt, &settings.generation, &settings.retry)?.text;
    let mut labels: Vec<String> = reply.lines().map(clean_label).filter(|l| !l.is_empty()).collect();
    if labels.is_empty() {
        return Err(LsimError::Llm(format!("no node labels in reply {reply:?}")));
    }
    if labels.len() > MAX_CHAIN_LEN {
        warnings.push(format!("{} labels returned, keeping the first {MAX_CHAIN_LEN}", labels.len()));
        labels.truncate(MAX_CHAIN_LEN);
    }
    let mut ids = Vec::with_capacity(labels.len());
    for label in &labels {
        match graph.find_by_label(label) {
            Some(id) => ids.push(id.clone()),
            None => {
                let id = index.nearest(label)?;
                warnings.push(format!("unknown label `{label}` replaced by nearest node `{id}`"));
                ids.push(id);
            }
        }
    }
    let chain = FactRuleChain::new(repair_chain(&ids, graph, warnings), owner);
    chain.validate(graph)?;
    Ok(chain)
}

#[derive(Debug, Clone)]
pub struct ChainExtraction {
    pub question_chain: FactRuleChain,
    pub answer_chain: FactRuleChain,
    pub warnings: Vec<String>,
}

pub fn extract_chain(
    pair: &QaPair,
    index: &LabelIndex<'_>,
    llm: &dyn LlmClient,
    settings: &ExtractionSettings,
) -> Result<ChainExtraction> {
    let mut warnings = Vec::new();
    let question_chain = extract_text_chain(&pair.question_text, ChainOwner::Question, index, llm, settings, &mut warnings)?;
    let answer_chain = extract_text_chain(&pair.answer_text, ChainOwner::Answer, index, llm, settings, &mut warnings)?;
    for w in &warnings {
        log::debug!("chain extraction, pair {}: {w}", pair.id);
    }
    Ok(ChainExtraction {
        question_chain,
        answer_chain,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashEncoder;
    use crate::llm::ScriptedLlm;
    use proptest::prelude::*;

    fn settings() -> ExtractionSettings {
        ExtractionSettings {
            retry: RetryPolicy::immediate(2),
            ..ExtractionSettings::default()
        }
    }

    /// a - b - c - d - e path plus a rule node r attached to b.
    fn sample_graph() -> FactRuleGraph {
        let mut g = FactRuleGraph::new();
        for (id, kind, label) in [
            ("a", NodeKind::Fact, "arrest"),
            ("b", NodeKind::Fact, "illegal search"),
            ("c", NodeKind::Rule, "Fourth Amendment"),
            ("d", NodeKind::Rule, "exclusionary rule"),
            ("e", NodeKind::Fact, "indictment"),
            ("r", NodeKind::Rule, "harmless error doctrine"),
        ] {
            g.add_node(id, kind, label).unwrap();
        }
        for (x, y) in [("a", "b"), ("b", "c"), ("c", "d"), ("d", "e"), ("b", "r")] {
            g.add_edge(x, y).unwrap();
        }
        g
    }

    fn pair() -> QaPair {
        QaPair::new("p1", "They searched my car.", "Move to suppress.")
    }

    #[test]
    fn build_graph_from_fixed_reply() {
        let llm = ScriptedLlm::responses([
            "NODE fact: illegal search\nNODE rule: Fourth Amendment\nEDGE illegal search | Fourth Amendment\n",
            "NODE fact: Illegal  Search\nNODE fact: arrest\nEDGE arrest | illegal search\n",
        ]);
        let pairs = vec![pair(), QaPair::new("p2", "q", "a")];
        let built = build_graph(&pairs, &llm, &settings()).unwrap();
        let g = built.graph;
        assert_eq!(g.len(), 3);
        assert_eq!(g.node("n00000").unwrap().label, "illegal search");
        assert_eq!(g.node("n00001").unwrap().kind, NodeKind::Rule);
        assert_eq!(g.node("n00002").unwrap().label, "arrest");
        assert_eq!(
            g.edges(),
            vec![("n00000".to_string(), "n00001".to_string()), ("n00000".to_string(), "n00002".to_string())]
        );
        assert!(built.warnings.is_empty());
    }

    #[test]
    fn build_graph_drops_self_loops() {
        let llm = ScriptedLlm::responses(["NODE fact: arrest\nNODE fact: ARREST\nEDGE arrest | Arrest\n"]);
        let built = build_graph(&[pair()], &llm, &settings()).unwrap();
        assert_eq!(built.graph.len(), 1);
        assert!(built.graph.edges().is_empty());
        assert!(built.warnings.iter().any(|w| w.contains("self-loop")));
    }

    #[test]
    fn build_graph_errors() {
        let llm = ScriptedLlm::responses(["nothing useful"]);
        assert!(build_graph(&[], &llm, &settings()).is_err());
        assert!(matches!(build_graph(&[pair()], &llm, &settings()), Err(LsimError::Llm(_))));
        let failing = ScriptedLlm::new(vec![Err("down".into())]);
        assert!(matches!(
            build_graph(&[pair()], &failing, &settings()),
            Err(LsimError::RetriesExhausted { attempts: 2, .. })
        ));
    }

    #[test]
    fn graph_invariants_enforced() {
        let mut g = sample_graph();
        assert!(g.add_edge("a", "a").is_err());
        assert!(g.add_edge("a", "zz").is_err());
        assert!(g.add_node("a", NodeKind::Fact, "other").is_err());
        assert!(g.add_node("q", NodeKind::Fact, "ARREST").is_err());
    }

    #[test]
    fn graph_file_roundtrip() {
        let g = sample_graph();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("graph.jsonl");
        g.save(&path).unwrap();
        assert_eq!(FactRuleGraph::load(&path).unwrap(), g);
        let text = std::fs::read_to_string(&path).unwrap();
        let first_edge = text.lines().position(|l| l.contains("\"edge\"")).unwrap();
        assert_eq!(first_edge, g.len());
    }

    #[test]
    fn extract_connected_path() {
        let g = sample_graph();
        let enc = HashEncoder::new(32, 0);
        let index = LabelIndex::new(&g, &enc).unwrap();
        let llm = ScriptedLlm::responses(["arrest\nillegal search\nFourth Amendment", "exclusionary rule\nindictment"]);
        let out = extract_chain(&pair(), &index, &llm, &settings()).unwrap();
        assert_eq!(out.question_chain.node_ids, vec!["a", "b", "c"]);
        assert_eq!(out.question_chain.owner, ChainOwner::Question);
        assert_eq!(out.answer_chain.node_ids, vec!["d", "e"]);
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn extract_truncates_to_four() {
        let g = sample_graph();
        let enc = HashEncoder::new(32, 0);
        let index = LabelIndex::new(&g, &enc).unwrap();
        let llm = ScriptedLlm::responses(["arrest\nillegal search\nFourth Amendment\nexclusionary rule\nindictment"]);
        let mut warnings = Vec::new();
        let chain = extract_text_chain("x", ChainOwner::Question, &index, &llm, &settings(), &mut warnings).unwrap();
        assert_eq!(chain.node_ids, vec!["a", "b", "c", "d"]);
        assert!(warnings.iter().any(|w| w.contains("keeping the first 4")));
    }

    #[test]
    fn extract_unknown_label_uses_nearest() {
        let g = sample_graph();
        let enc = HashEncoder::new(64, 0);
        let index = LabelIndex::new(&g, &enc).unwrap();
        let llm = ScriptedLlm::responses(["- [rule] the fourth amendment"]);
        let mut warnings = Vec::new();
        let chain = extract_text_chain("x", ChainOwner::Question, &index, &llm, &settings(), &mut warnings).unwrap();
        assert_eq!(chain.node_ids, vec!["c"]);
        assert!(warnings.iter().any(|w| w.contains("nearest")));
    }

    #[test]
    fn extract_bridges_gaps() {
        let g = sample_graph();
        let enc = HashEncoder::new(32, 0);
        let index = LabelIndex::new(&g, &enc).unwrap();
        // a and c are two hops apart: bridged through b
        let llm = ScriptedLlm::responses(["1. arrest\n2. Fourth Amendment"]);
        let mut warnings = Vec::new();
        let chain = extract_text_chain("x", ChainOwner::Answer, &index, &llm, &settings(), &mut warnings).unwrap();
        assert_eq!(chain.node_ids, vec!["a", "b", "c"]);
        // a to e needs 5 nodes: e dropped
        let llm = ScriptedLlm::responses(["arrest\nindictment"]);
        let chain = extract_text_chain("x", ChainOwner::Answer, &index, &llm, &settings(), &mut warnings).unwrap();
        assert_eq!(chain.node_ids, vec!["a"]);
    }

    #[test]
    fn extract_empty_reply_fails() {
        let g = sample_graph();
        let enc = HashEncoder::new(32, 0);
        let index = LabelIndex::new(&g, &enc).unwrap();
        let llm = ScriptedLlm::responses(["   \n"]);
        let mut warnings = Vec::new();
        assert!(extract_text_chain("x", ChainOwner::Answer, &index, &llm, &settings(), &mut warnings).is_err());
    }

    #[test]
    fn nearest_node_cases() {
        let g = sample_graph();
        let enc = HashEncoder::new(64, 0);
        assert_eq!(nearest_node("Fourth Amendment", &g, &enc).unwrap(), "c");
        let mut single = FactRuleGraph::new();
        single.add_node("only", NodeKind::Rule, "Miranda rule").unwrap();
        assert_eq!(nearest_node("completely unrelated words", &single, &enc).unwrap(), "only");
        assert!(nearest_node("x", &FactRuleGraph::new(), &enc).is_err());
    }

    #[test]
    fn nearest_node_matches_exhaustive_search() {
        let mut g = FactRuleGraph::new();
        g.add_node("x1", NodeKind::Fact, "probation violation").unwrap();
        g.add_node("x2", NodeKind::Fact, "traffic stop").unwrap();
        g.add_node("x3", NodeKind::Rule, "speedy trial act").unwrap();
        let enc = HashEncoder::new(16, 3);
        for query in ["violation of probation terms", "stop", "trial delay", "unrelated"] {
            let q = enc.encode(query).unwrap();
            let mut best = ("", f64::NEG_INFINITY);
            for n in g.nodes() {
                let s = cosine_similarity(&q, &enc.encode(&n.label).unwrap()).unwrap();
                if s > best.1 {
                    best = (&n.id, s);
                }
            }
            assert_eq!(nearest_node(query, &g, &enc).unwrap(), best.0, "{query}");
        }
    }

    #[test]
    fn serialize_examples() {
        let g = sample_graph();
        let one = FactRuleChain::new(vec!["a".into()], ChainOwner::Question);
        assert_eq!(serialize_chain(&one, &g).unwrap(), "[fact] arrest");
        let two = FactRuleChain::new(vec!["b".into(), "c".into()], ChainOwner::Question);
        assert_eq!(serialize_chain(&two, &g).unwrap(), "[fact] illegal search -> [rule] Fourth Amendment");
        assert_eq!(serialize_chain(&two, &g).unwrap(), serialize_chain(&two.clone(), &g).unwrap());
        let bad = FactRuleChain::new(vec!["zz".into()], ChainOwner::Question);
        assert!(serialize_chain(&bad, &g).is_err());
    }

    #[test]
    fn chain_validation() {
        let g = sample_graph();
        let ok = FactRuleChain::new(vec!["a".into(), "b".into(), "r".into()], ChainOwner::Question);
        assert!(ok.validate(&g).is_ok());
        let gap = FactRuleChain::new(vec!["a".into(), "c".into()], ChainOwner::Question);
        assert!(gap.validate(&g).is_err());
        let predicted = FactRuleChain::new(vec!["a".into(), "c".into()], ChainOwner::Predicted);
        assert!(predicted.validate(&g).is_ok());
        let dup = FactRuleChain::new(vec!["a".into(), "b".into(), "a".into()], ChainOwner::Question);
        assert!(dup.validate(&g).is_err());
        let long = FactRuleChain::new(["a", "b", "c", "d", "e"].map(String::from).to_vec(), ChainOwner::Answer);
        assert!(long.validate(&g).is_err());
        assert!(FactRuleChain::new(vec![], ChainOwner::Answer).validate(&g).is_err());
    }

    #[test]
    fn shortest_path_avoids_nodes() {
        let g = sample_graph();
        assert_eq!(g.shortest_path("a", "d", &BTreeSet::new()).unwrap(), vec!["b", "c", "d"]);
        let avoid = BTreeSet::from(["b".to_string()]);
        assert!(g.shortest_path("a", "d", &avoid).is_none());
    }

    proptest! {
        #[test]
        fn serialization_injective(xs in proptest::collection::vec(0usize..6, 1..5),
                                   ys in proptest::collection::vec(0usize..6, 1..5)) {
            let g = sample_graph();
            let ids: Vec<&String> = g.node_ids().collect();
            let mk = |v: &[usize]| {
                let mut seen = Vec::new();
                for &i in v {
                    if !seen.contains(ids[i]) {
                        seen.push(ids[i].clone());
                    }
                }
                FactRuleChain::new(seen, ChainOwner::Predicted)
            };
            let (a, b) = (mk(&xs), mk(&ys));
            let (sa, sb) = (serialize_chain(&a, &g).unwrap(), serialize_chain(&b, &g).unwrap());
            prop_assert_eq!(a.node_ids == b.node_ids, sa == sb);
        }
    }
}
