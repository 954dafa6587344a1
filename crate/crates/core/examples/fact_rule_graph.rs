//! Builds a fact-rule graph from a synthetic corpus with the mock llm, then
//! extracts and prints a few question/answer chains.
//!
//!     cargo run --example fact_rule_graph -- [pairs]

use lsim::embedding::HashEncoder;
use lsim::fact_rule::{build_graph, extract_chain, serialize_chain, ExtractionSettings, LabelIndex};
use lsim::llm::MockLlm;
use lsim::synthetic::legal_corpus;

fn main() -> lsim::Result<()> {
    let n: usize = std::env::args().nth(1).map_or(64, |s| s.parse().expect("pair count"));
    let pairs = legal_corpus(n, 7);
    let settings = ExtractionSettings::default();
    let built = build_graph(&pairs, &MockLlm, &settings)?;
    let g = &built.graph;
    println!("{} nodes, {} edges, {} warnings", g.len(), g.edges().len(), built.warnings.len());
    for node in g.nodes().take(12) {
        println!("  {} {} {}", node.id, node.kind.tag(), node.label);
    }

    let encoder = HashEncoder::new(64, 0);
    let index = LabelIndex::new(g, &encoder)?;
    for pair in pairs.iter().take(3) {
        let ex = extract_chain(pair, &index, &MockLlm, &settings)?;
        println!("\nQ: {}", pair.question_text);
        println!("  question chain: {}", serialize_chain(&ex.question_chain, g)?);
        println!("  answer chain:   {}", serialize_chain(&ex.answer_chain, g)?);
        for w in &ex.warnings {
            println!("  note: {w}");
        }
    }
    Ok(())
}
