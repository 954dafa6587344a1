//! Runs every stage on a synthetic corpus with the mock llm and the hash
//! encoder, then prints the metrics table.
//!
//!     cargo run --release --example end_to_end -- [pairs] [run_dir]

use std::path::PathBuf;

use lsim::data::write_dataset;
use lsim::pipeline::{Pipeline, RunConfig};
use lsim::synthetic::legal_corpus;

fn main() -> lsim::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map_or(200, |s| s.parse().expect("pair count"));
    let run_dir = args.next().map_or_else(|| std::env::temp_dir().join("lsim-end-to-end"), PathBuf::from);
    std::fs::create_dir_all(&run_dir)?;

    let dataset = run_dir.join("input.jsonl");
    write_dataset(&dataset, &legal_corpus(n, 7))?;

    let mut config = RunConfig::default();
    config.paths.dataset = dataset;
    config.paths.run_dir = run_dir.clone();
    config.encoder.dim = 64;
    config.policy.hidden_widths = vec![64, 32];
    config.policy.epochs = 5;
    config.dssm.hidden_widths = vec![64, 32, 16];
    config.dssm.epochs = 5;
    config.dssm.pool_size = 8;
    config.repeats = 2;

    let pipeline = Pipeline::new(config)?;
    for report in pipeline.run_all()? {
        println!("{:>15}  {}", report.stage, report.summary);
    }
    println!("\n{}", std::fs::read_to_string(run_dir.join("metrics_table.txt"))?);
    println!("artifacts in {}", run_dir.display());
    Ok(())
}
