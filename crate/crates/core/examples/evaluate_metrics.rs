//! Scores predictions against references with METEOR, ROUGE-1/2/L and the
//! embedding-cosine BERTScore proxy.
//!
//!     cargo run --example evaluate_metrics

use lsim::embedding::HashEncoder;
use lsim::metrics::{evaluate_run, format_table, meteor, rouge_l, rouge_n, tokenize};

fn main() -> lsim::Result<()> {
    let c = tokenize("The cat sat.");
    let r = tokenize("the cat sat on the mat");
    println!("rouge-1 {:?}", rouge_n(&c, &r, 1));
    println!("rouge-2 {:?}", rouge_n(&c, &r, 2));
    println!("rouge-l {:?}", rouge_l(&c, &r));
    println!("meteor  {:.4}\n", meteor(&c, &r));

    let refs = vec![
        ("a".to_string(), "You may be able to suppress the evidence from the search.".to_string()),
        ("b".to_string(), "Ask the court about expungement after probation ends.".to_string()),
    ];
    let close = vec![
        ("a".to_string(), "The evidence from the search may be suppressed.".to_string()),
        ("b".to_string(), "After probation ends, ask about expungement.".to_string()),
    ];
    let off = vec![
        ("a".to_string(), "Call a lawyer.".to_string()),
        ("b".to_string(), "".to_string()),
    ];
    let encoder = HashEncoder::new(128, 0);
    let good = evaluate_run(&close, &refs, &encoder)?;
    let bad = evaluate_run(&off, &refs, &encoder)?;
    print!("{}", format_table(&[("paraphrase", &good), ("terse", &bad)]));
    Ok(())
}
