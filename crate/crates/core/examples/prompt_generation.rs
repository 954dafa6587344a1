//! Assembles an in-context prompt from retrieved exemplars and a predicted
//! chain, then answers it with the deterministic mock llm.
//!
//!     cargo run --example prompt_generation

use std::collections::HashMap;

use lsim::data::QaPair;
use lsim::dssm::RetrievalResult;
use lsim::fact_rule::{ChainOwner, FactRuleChain, FactRuleGraph, NodeKind};
use lsim::generation::{assemble_context, build_prompt, generate_answer, AnswerRequest, DEFAULT_ANSWER_TEMPLATE};
use lsim::llm::{GenerationConfig, MockLlm, RetryPolicy, RunLog};

fn main() -> lsim::Result<()> {
    let mut graph = FactRuleGraph::new();
    graph.add_node("f1", NodeKind::Fact, "car searched without a warrant")?;
    graph.add_node("r1", NodeKind::Rule, "Fourth Amendment")?;
    graph.add_node("r2", NodeKind::Rule, "Exclusionary Rule")?;
    graph.add_edge("f1", "r1")?;
    graph.add_edge("r1", "r2")?;
    let chain = FactRuleChain::new(vec!["f1".into(), "r1".into(), "r2".into()], ChainOwner::Predicted);

    let database: HashMap<String, QaPair> = [
        ("d1", "Police opened my trunk at a traffic stop without asking. Is that allowed?", "Without consent or probable cause the search may be unlawful; a motion to suppress is worth discussing with counsel."),
        ("d2", "Can evidence from an illegal search be used against me?", "Generally no. Evidence obtained in violation of the Fourth Amendment can be excluded."),
        ("d3", "How long does a misdemeanor stay on my record?", "It depends on the state; many allow expungement after a waiting period."),
    ]
    .into_iter()
    .map(|(id, q, a)| (id.to_string(), QaPair::new(id, q, a)))
    .collect();
    let retrieved: Vec<RetrievalResult> = ["d2", "d1", "d3"]
        .iter()
        .enumerate()
        .map(|(i, id)| RetrievalResult {
            candidate_id: id.to_string(),
            score: 2.0 - i as f64 * 0.5,
            rank: i + 1,
        })
        .collect();
    let context = assemble_context(&retrieved, &database, 2)?;

    let question = QaPair::new("u1", "The officer searched my car during a stop and found pills. Can they use that?", "");
    println!("{}", build_prompt(&question, &chain, &graph, &context, DEFAULT_ANSWER_TEMPLATE)?);

    let request = AnswerRequest {
        question: &question,
        chain: &chain,
        graph: &graph,
        context: &context,
        template: DEFAULT_ANSWER_TEMPLATE,
    };
    let log = RunLog::new();
    let answer = generate_answer(&request, &MockLlm, &GenerationConfig::default(), &RetryPolicy::default(), &log)?;
    println!("---\n{answer}");
    Ok(())
}
