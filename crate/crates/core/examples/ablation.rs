//! Feature ablation: retrains the pipeline's ranker without the logical or
//! the semantic half and prints the comparison table.
//!
//!     cargo run --release --example ablation -- [pairs]

use lsim::data::write_dataset;
use lsim::dssm::Ablation;
use lsim::pipeline::{Pipeline, RunConfig};
use lsim::synthetic::legal_corpus;

fn main() -> lsim::Result<()> {
    let n: usize = std::env::args().nth(1).map_or(150, |s| s.parse().expect("pair count"));
    let dir = std::env::temp_dir().join("lsim-ablation");
    std::fs::create_dir_all(&dir)?;
    let mut config = RunConfig::default();
    config.paths.dataset = dir.join("input.jsonl");
    config.paths.run_dir = dir.join("run");
    write_dataset(&config.paths.dataset, &legal_corpus(n, 11))?;
    config.policy.epochs = 10;
    config.dssm.epochs = 20;

    let pipeline = Pipeline::new(config)?;
    pipeline.run_all()?;
    let report = pipeline.ablate(&[Ablation::NoLogical, Ablation::NoSemantic])?;
    println!("{}", report.summary.trim());
    Ok(())
}
