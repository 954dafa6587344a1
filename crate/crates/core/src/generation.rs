//! Prompt assembly and answer generation from retrieved exemplars.

use std::collections::HashMap;

use crate::data::QaPair;
use crate::dssm::RetrievalResult;
use crate::error::{LsimError, Result};
use crate::fact_rule::{serialize_chain, FactRuleChain, FactRuleGraph};
use crate::llm::{complete_with_retry, GenerationConfig, LlmClient, LogRecord, RetryPolicy, RunLog};

pub const ANSWER_INSTRUCTION: &str = "Your task is to provide legal advice on the user's question. I will provide you with the logical structure of the user's question, along with similar questions previously asked by other users and the responses given by real lawyers. Please use this information to generate a response to the user's question.";

pub const DEFAULT_ANSWER_TEMPLATE: &str = "Your task is to provide legal advice on the user's question. I will provide you with the logical structure of the user's question, along with similar questions previously asked by other users and the responses given by real lawyers. Please use this information to generate a response to the user's question.

Logical structure:
{logical_structure}

Similar questions and lawyer responses:
{exemplars}

User's question:
{question}

Response:
";

pub const REQUIRED_PLACEHOLDERS: [&str; 3] = ["{question}", "{logical_structure}", "{exemplars}"];

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PromptContext {
    /// (question, answer) in retrieval rank order.
    pub exemplars: Vec<(String, String)>,
}

impl PromptContext {
    pub fn len(&self) -> usize {
        self.exemplars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplars.is_empty()
    }
}

/// Top `min(k, results)` exemplars in rank order.
pub fn assemble_context(results: &[RetrievalResult], database: &HashMap<String, QaPair>, k: usize) -> Result<PromptContext> {
    if k == 0 {
        return Err(LsimError::InvalidInput("k must be at least 1".into()));
    }
    let mut ranked: Vec<&RetrievalResult> = results.iter().collect();
    ranked.sort_by_key(|r| r.rank);
    let exemplars = ranked
        .into_iter()
        .take(k)
        .map(|r| {
            database
                .get(&r.candidate_id)
                .map(|p| (p.question_text.clone(), p.answer_text.clone()))
                .ok_or_else(|| LsimError::InvalidInput(format!("retrieved id `{}` not in the database", r.candidate_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    if exemplars.is_empty() {
        log::warn!("empty retrieval context; generating without exemplars");
    }
    Ok(PromptContext { exemplars })
}

fn render_exemplars(context: &PromptContext) -> String {
    if context.is_empty() {
        return "(none)".to_string();
    }
    let flat = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ");
    context
        .exemplars
        .iter()
        .enumerate()
        .map(|(i, (q, a))| format!("{}. Question: {}\n   Answer: {}", i + 1, flat(q), flat(a)))
        .collect::<Vec<_>>()
        .join("\n\n")
}

pub fn check_template(template: &str) -> Result<()> {
    match REQUIRED_PLACEHOLDERS.iter().find(|p| !template.contains(*p)) {
        Some(missing) => Err(LsimError::MissingPlaceholder(missing.to_string())),
        None => Ok(()),
    }
}

pub fn build_prompt(
    question: &QaPair,
    chain: &FactRuleChain,
    graph: &FactRuleGraph,
    context: &PromptContext,
    template: &str,
) -> Result<String> {
    check_template(template)?;
    let structure = serialize_chain(chain, graph)?;
    // one pass so placeholder text inside the inputs is left alone
    let mut out = String::with_capacity(template.len() + 512);
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let tail = &rest[start..];
        let matched = REQUIRED_PLACEHOLDERS.iter().find(|p| tail.starts_with(*p));
        match matched {
            Some(&"{question}") => out.push_str(question.question_text.trim()),
            Some(&"{logical_structure}") => out.push_str(&structure),
            Some(_) => out.push_str(&render_exemplars(context)),
            None => {
                out.push('{');
                rest = &tail[1..];
                continue;
            }
        }
        rest = &tail[matched.expect("matched").len()..];
    }
    out.push_str(rest);
    Ok(out)
}

pub struct AnswerRequest<'a> {
    pub question: &'a QaPair,
    pub chain: &'a FactRuleChain,
    pub graph: &'a FactRuleGraph,
    pub context: &'a PromptContext,
    pub template: &'a str,
}

/// Builds the prompt, calls the llm with retries, and logs the exchange
/// (failures included) under stage `answer`.
pub fn generate_answer(
    request: &AnswerRequest<'_>,
    llm: &dyn LlmClient,
    config: &GenerationConfig,
    retry: &RetryPolicy,
    log: &RunLog,
) -> Result<String> {
    config.validate()?;
    let prompt = build_prompt(request.question, request.chain, request.graph, request.context, request.template)?;
    let outcome = complete_with_retry(llm, &prompt, config, retry);
    let (response, retries, error) = match &outcome {
        Ok(c) => (Some(c.text.trim().to_string()), c.retries, None),
        Err(e) => (None, retry.attempts.saturating_sub(1), Some(e.to_string())),
    };
    log.append(LogRecord {
        stage: "answer".into(),
        key: request.question.id.clone(),
        prompt,
        config: config.clone(),
        response: response.clone(),
        retries,
        error,
    });
    outcome.map(|c| c.text.trim().to_string())
}
