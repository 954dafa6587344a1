//! Language-model boundary: the [`LlmClient`] trait, retry with backoff, an
//! append-only run log, and three clients.
//!
//! * [`MockLlm`] recognizes the crate's own prompt kinds (graph construction,
//!   chain selection, relevance scoring, answer generation) and answers each
//!   with a deterministic heuristic. It never touches the network.
//! * [`ScriptedLlm`] replays canned responses or failures, for tests.
//! * [`RemoteLlm`] posts `{prompt, temperature, top_p, max_tokens, model}` to
//!   an HTTP endpoint and reads `{text}` back.

use std::collections::{BTreeSet, VecDeque};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LsimError, Result};
use crate::metrics::tokenize;

pub const LLM_ENDPOINT_ENV: &str = "LLM_ENDPOINT";
pub const LLM_API_KEY_ENV: &str = "LLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub model_id: String,
    /// Sampling seed forwarded to the client; repeated runs vary only this.
    pub seed: Option<u64>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            temperature: 0.8,
            top_p: 0.9,
            max_tokens: 4096,
            model_id: "mock".into(),
            seed: None,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.top_p) {
            return Err(LsimError::Config(format!("top_p {} outside [0, 1]", self.top_p)));
        }
        if self.max_tokens == 0 {
            return Err(LsimError::Config("max_tokens must be at least 1".into()));
        }
        if self.temperature < 0.0 {
            return Err(LsimError::Config("temperature must be non-negative".into()));
        }
        Ok(())
    }
}

pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &str, config: &GenerationConfig) -> Result<String>;
}

impl<T: LlmClient + ?Sized> LlmClient for &T {
    fn complete(&self, prompt: &str, config: &GenerationConfig) -> Result<String> {
        (**self).complete(prompt, config)
    }
}

impl<T: LlmClient + ?Sized> LlmClient for Box<T> {
    fn complete(&self, prompt: &str, config: &GenerationConfig) -> Result<String> {
        (**self).complete(prompt, config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff_ms: u64,
    pub multiplier: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff_ms: 1000,
            multiplier: 2,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(attempts: u32) -> Self {
        Self {
            attempts,
            initial_backoff_ms: 0,
            multiplier: 2,
        }
    }

    fn backoff(&self, retry: u32) -> Duration {
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(u64::from(self.multiplier).pow(retry)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub retries: u32,
}

pub fn complete_with_retry(
    llm: &dyn LlmClient,
    prompt: &str,
    config: &GenerationConfig,
    retry: &RetryPolicy,
) -> Result<Completion> {
    complete_parsed(llm, prompt, config, retry, |_| Ok(())).map(|(_, c)| c)
}

/// Like [`complete_with_retry`], but a reply `parse` rejects also counts as a
/// failed attempt.
pub fn complete_parsed<T>(
    llm: &dyn LlmClient,
    prompt: &str,
    config: &GenerationConfig,
    retry: &RetryPolicy,
    parse: impl Fn(&str) -> std::result::Result<T, String>,
) -> Result<(T, Completion)> {
    let attempts = retry.attempts.max(1);
    let mut last = String::new();
    for attempt in 0..attempts {
        if attempt > 0 {
            log::warn!("llm call failed ({last}); retry {attempt}/{}", attempts - 1);
            std::thread::sleep(retry.backoff(attempt - 1));
        }
        match llm.complete(prompt, config) {
            Ok(text) => match parse(&text) {
                Ok(value) => {
                    return Ok((
                        value,
                        Completion {
                            text,
                            retries: attempt,
                        },
                    ))
                }
                Err(e) => last = e,
            },
            Err(e) => last = e.to_string(),
        }
    }
    Err(LsimError::RetriesExhausted { attempts, last })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: String,
    pub key: String,
    pub prompt: String,
    pub config: GenerationConfig,
    pub response: Option<String>,
    pub retries: u32,
    pub error: Option<String>,
}

/// Append-only record of every llm exchange; safe to share across threads.
#[derive(Debug, Default)]
pub struct RunLog {
    records: Mutex<Vec<LogRecord>>,
}

impl RunLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&self, record: LogRecord) {
        self.records.lock().expect("run log poisoned").push(record);
    }

    pub fn records(&self) -> Vec<LogRecord> {
        self.records.lock().expect("run log poisoned").clone()
    }

    pub fn len(&self) -> usize {
        self.records.lock().expect("run log poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes records ordered by `(stage, key)` so concurrent producers still
    /// yield a stable file.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut records = self.records();
        records.sort_by(|a, b| (&a.stage, &a.key).cmp(&(&b.stage, &b.key)));
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Replays a fixed script of responses (`Err` entries simulate failures) and
/// records every prompt it receives. Cycles once the script is exhausted.
#[derive(Debug)]
pub struct ScriptedLlm {
    script: Vec<std::result::Result<String, String>>,
    cursor: Mutex<usize>,
    prompts: Mutex<Vec<String>>,
}

impl ScriptedLlm {
    pub fn new(script: Vec<std::result::Result<String, String>>) -> Self {
        assert!(!script.is_empty(), "script must not be empty");
        Self {
            script,
            cursor: Mutex::new(0),
            prompts: Mutex::new(Vec::new()),
        }
    }

    pub fn responses<S: Into<String>>(responses: impl IntoIterator<Item = S>) -> Self {
        Self::new(responses.into_iter().map(|s| Ok(s.into())).collect())
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().expect("poisoned").clone()
    }

    pub fn calls(&self) -> usize {
        self.prompts.lock().expect("poisoned").len()
    }
}

impl LlmClient for ScriptedLlm {
    fn complete(&self, prompt: &str, _config: &GenerationConfig) -> Result<String> {
        self.prompts.lock().expect("poisoned").push(prompt.to_string());
        let mut cursor = self.cursor.lock().expect("poisoned");
        let entry = self.script[*cursor % self.script.len()].clone();
        *cursor += 1;
        entry.map_err(LsimError::Llm)
    }
}

/// Blocking HTTP client for a completion service.
#[derive(Debug, Clone)]
pub struct RemoteLlm {
    pub endpoint: String,
    pub api_key: Option<String>,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    prompt: &'a str,
    temperature: f64,
    top_p: f64,
    max_tokens: u32,
    model: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct CompletionResponse {
    text: String,
}

impl RemoteLlm {
    pub fn new(endpoint: impl Into<String>) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .expect("http client");
        Self {
            endpoint: endpoint.into(),
            api_key: None,
            client,
        }
    }

    /// Endpoint from `LLM_ENDPOINT`, key from `LLM_API_KEY`.
    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var(LLM_ENDPOINT_ENV)
            .map_err(|_| LsimError::Config(format!("{LLM_ENDPOINT_ENV} is not set")))?;
        let mut llm = Self::new(endpoint);
        llm.api_key = std::env::var(LLM_API_KEY_ENV).ok();
        Ok(llm)
    }
}

impl LlmClient for RemoteLlm {
    fn complete(&self, prompt: &str, config: &GenerationConfig) -> Result<String> {
        let body = CompletionRequest {
            prompt,
            temperature: config.temperature,
            top_p: config.top_p,
            max_tokens: config.max_tokens,
            model: &config.model_id,
            seed: config.seed,
        };
        let mut request = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| LsimError::Llm(format!("{}: {e}", self.endpoint)))?;
        let parsed: CompletionResponse = response
            .json()
            .map_err(|e| LsimError::Llm(format!("bad response body: {e}")))?;
        Ok(parsed.text)
    }
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "because", "been", "but", "by", "can", "could", "did", "do", "does",
    "for", "from", "had", "has", "have", "he", "her", "him", "his", "how", "i", "if", "in", "into", "is", "it",
    "its", "me", "my", "no", "not", "of", "on", "or", "our", "she", "should", "so", "that", "the", "their", "them",
    "then", "there", "they", "this", "to", "under", "was", "we", "were", "what", "when", "which", "who", "will",
    "with", "would", "you", "your", "after", "about", "also", "any", "before", "just", "may", "might", "now",
    "still", "than", "what", "where", "while", "without",
];

fn is_stopword(word: &str) -> bool {
    STOPWORDS.contains(&word.to_lowercase().as_str())
}

/// Deterministic offline stand-in for a hosted model.
///
/// The reply is a pure function of `(prompt, config)`:
/// * graph-construction prompts: title-case phrases of two or more words
///   become rule nodes, long lowercase content words become fact nodes, and
///   nodes are linked in order of appearance;
/// * chain-selection prompts: the listed node labels that occur in the legal
///   text, in order of first occurrence (up to five);
/// * relevance prompts: `Score: n` with `n = round(5 * jaccard)` over the two
///   questions' content tokens;
/// * anything else: an answer built from the first exemplar answer (if any)
///   and tagged with a hash of the prompt and config.
#[derive(Debug, Clone, Default)]
pub struct MockLlm;

impl MockLlm {
    pub fn new() -> Self {
        Self
    }

    fn graph_reply(prompt: &str) -> String {
        let question = section(prompt, "Question:").unwrap_or_default();
        let answer = section(prompt, "Answer:").unwrap_or_default();
        let mut nodes: Vec<(usize, &'static str, String)> = Vec::new();
        let mut seen = BTreeSet::new();
        let full = format!("{question}\n{answer}");
        for (pos, phrase) in title_case_runs(&full).into_iter().take(2) {
            if seen.insert(phrase.to_lowercase()) {
                nodes.push((pos, "rule", phrase));
            }
        }
        for (text, offset, limit) in [(question.as_str(), 0, 3), (answer.as_str(), question.len() + 1, 2)] {
            let mut taken = 0;
            for (pos, word) in word_positions(text) {
                if taken == limit {
                    break;
                }
                let lower = word.to_lowercase();
                if word.chars().all(|c| c.is_ascii_lowercase()) && lower.len() >= 7 && !is_stopword(&lower) && seen.insert(lower.clone()) {
                    nodes.push((offset + pos, "fact", lower));
                    taken += 1;
                }
            }
        }
        nodes.sort_by_key(|n| n.0);
        let mut out = String::new();
        for (_, kind, label) in &nodes {
            out.push_str(&format!("NODE {kind}: {label}\n"));
        }
        for pair in nodes.windows(2) {
            out.push_str(&format!("EDGE {} | {}\n", pair[0].2, pair[1].2));
        }
        out
    }

    fn chain_reply(prompt: &str) -> String {
        let text = section(prompt, "Legal text:").unwrap_or_default();
        let text_tokens = tokenize(&text).tokens;
        let labels: Vec<String> = section(prompt, "Graph nodes:")
            .unwrap_or_default()
            .lines()
            .filter_map(|l| l.trim().strip_prefix("- "))
            .map(|l| match l.split_once("] ") {
                Some((_, label)) => label.to_string(),
                None => l.to_string(),
            })
            .collect();
        let mut hits: Vec<(usize, &String)> = labels
            .iter()
            .filter_map(|label| {
                let lt = tokenize(label).tokens;
                if lt.is_empty() {
                    return None;
                }
                text_tokens.windows(lt.len()).position(|w| w == lt.as_slice()).map(|p| (p, label))
            })
            .collect();
        hits.sort();
        if hits.is_empty() {
            // nothing recognizable: fall back to the first content word
            return text_tokens
                .iter()
                .find(|t| !is_stopword(t))
                .cloned()
                .unwrap_or_else(|| "unknown".into());
        }
        hits.iter().take(5).map(|(_, l)| l.as_str()).collect::<Vec<_>>().join("\n")
    }

    fn score_reply(prompt: &str) -> String {
        let content = |s: Option<String>| -> BTreeSet<String> {
            tokenize(&s.unwrap_or_default())
                .tokens
                .into_iter()
                .filter(|t| !is_stopword(t))
                .collect()
        };
        let a = content(section(prompt, "Question1:"));
        let b = content(section(prompt, "Question2:"));
        let union = a.union(&b).count();
        let jaccard = if union == 0 { 0.0 } else { a.intersection(&b).count() as f64 / union as f64 };
        format!("Score: {}", (5.0 * jaccard).round() as u32)
    }

    fn answer_reply(prompt: &str, config: &GenerationConfig) -> String {
        let mut hasher = Sha256::new();
        hasher.update(prompt.as_bytes());
        hasher.update(serde_json::to_vec(config).expect("config serializes"));
        let tag = hex::encode(&hasher.finalize()[..4]);
        let first_answer = prompt
            .lines()
            .find_map(|l| l.trim().strip_prefix("Answer:"))
            .map(str::trim)
            .filter(|a| !a.is_empty());
        match first_answer {
            Some(answer) => format!("Based on similar cases: {answer} [mock {tag}]"),
            None => format!("Please consult a licensed attorney about your situation. [mock {tag}]"),
        }
    }
}

impl LlmClient for MockLlm {
    fn complete(&self, prompt: &str, config: &GenerationConfig) -> Result<String> {
        use crate::dssm::RELEVANCE_INSTRUCTION;
        use crate::fact_rule::{CHAIN_INSTRUCTION, GRAPH_INSTRUCTION};
        let reply = if prompt.starts_with(GRAPH_INSTRUCTION) {
            Self::graph_reply(prompt)
        } else if prompt.starts_with(CHAIN_INSTRUCTION) {
            Self::chain_reply(prompt)
        } else if prompt.starts_with(RELEVANCE_INSTRUCTION) {
            Self::score_reply(prompt)
        } else {
            Self::answer_reply(prompt, config)
        };
        Ok(reply)
    }
}

/// Text following a `marker` line up to the next blank line.
fn section(prompt: &str, marker: &str) -> Option<String> {
    let mut lines = prompt.lines();
    lines.by_ref().find(|l| l.trim() == marker)?;
    let body: Vec<&str> = lines.take_while(|l| !l.trim().is_empty()).collect();
    Some(body.join("\n"))
}

fn word_positions(text: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        let word_char = c.is_alphanumeric() || c == '\'';
        match (word_char, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, &text[s..i]));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, &text[s..]));
    }
    out
}

/// Maximal runs of two or more capitalized non-stopwords.
fn title_case_runs(text: &str) -> Vec<(usize, String)> {
    let mut runs = Vec::new();
    let mut current: VecDeque<(usize, &str)> = VecDeque::new();
    let mut last_end = 0;
    let flush = |current: &mut VecDeque<(usize, &str)>, runs: &mut Vec<(usize, String)>| {
        if current.len() >= 2 {
            let words: Vec<&str> = current.iter().map(|w| w.1).collect();
            runs.push((current[0].0, words.join(" ")));
        }
        current.clear();
    };
    for (pos, word) in word_positions(text) {
        let gap = &text[last_end..pos];
        let contiguous = gap.chars().all(|c| c == ' ');
        let capital = word.chars().next().is_some_and(|c| c.is_uppercase()) && !is_stopword(word);
        if !capital || !contiguous {
            flush(&mut current, &mut runs);
        }
        if capital {
            current.push_back((pos, word));
        }
        last_end = pos + word.len();
    }
    flush(&mut current, &mut runs);
    runs
}
