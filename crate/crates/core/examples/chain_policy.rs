//! Trains the REINFORCE chain policy on the planted ten-node task and shows
//! greedy predictions at several inference depths.
//!
//!     cargo run --release --example chain_policy -- [--ring]

use lsim::embedding::HashEncoder;
use lsim::fact_rule::serialize_chain;
use lsim::policy::{answer_recovery, predict_chain, train_policy, PolicyConfig, PolicyContext};
use lsim::synthetic::policy_task;

fn main() -> lsim::Result<()> {
    let ring = std::env::args().any(|a| a == "--ring");
    let (graph, pairs) = policy_task(ring);
    let encoder = HashEncoder::new(64, 0);
    let ctx = PolicyContext::new(&graph, &encoder)?;
    let config = PolicyConfig::default();
    let trained = train_policy(&pairs, &ctx, &config)?;
    for log in trained.history.iter().step_by(5) {
        println!("epoch {:>2}  mean return {:.3}", log.epoch, log.mean_return);
    }
    for z in 0..=config.inference_steps {
        let r = answer_recovery(&pairs, &trained.model, &ctx, config.action_mode, z)?;
        println!("z = {z}: answer-node recovery {r:.3}");
    }
    let (question, answer) = &pairs[0];
    let predicted = predict_chain(question, &trained.model, &ctx, config.action_mode, config.inference_steps)?;
    println!("\nquestion  {}", serialize_chain(question, &graph)?);
    println!("answer    {}", serialize_chain(answer, &graph)?);
    println!("predicted {}", serialize_chain(&predicted, &graph)?);
    Ok(())
}
