use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lsim::dssm::Ablation;
use lsim::pipeline::{Pipeline, RunConfig, StageReport};

/// Legal QA pipeline: fact-rule graphs, chain policy, DSSM retrieval and
/// in-context answer generation.
#[derive(Parser, Debug)]
#[command(name = "lsim", version)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `paths.run_dir`.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Overrides `paths.dataset`.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate the dataset and copy it into the run directory.
    Ingest,
    /// Seeded 80/20 database split, then 80/20 train/test.
    Split,
    /// Build the fact-rule graph from the training split.
    BuildGraph,
    /// Extract question (and, for training pairs, answer) chains. Resumable.
    ExtractChains,
    /// Train the chain policy and predict chains for every pair.
    TrainPolicy,
    /// Annotate relevance, build triplets and train the ranker.
    TrainDssm,
    /// Top-k retrieval for each test question.
    Retrieve,
    /// Generate answers for the test questions.
    Answer {
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Score generated answers against the references.
    Evaluate {
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Retrain without one feature half and compare.
    Ablate {
        /// no_logical, no_semantic or both.
        #[arg(long, default_value = "both", value_parser = ["no_logical", "no_semantic", "both"])]
        mode: String,
    },
    /// ingest through evaluate.
    RunAll,
}

fn load_config(cli: &Cli) -> lsim::Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = &cli.run_dir {
        config.paths.run_dir = dir.clone();
    }
    if let Some(dataset) = &cli.dataset {
        config.paths.dataset = dataset.clone();
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Command::Answer { repeats: Some(r) } | Command::Evaluate { repeats: Some(r) } = cli.command {
        config.repeats = r;
    }
    config.validate()?;
    Ok(config)
}

fn ablation_modes(mode: &str) -> lsim::Result<Vec<Ablation>> {
    if mode == "both" {
        return Ok(vec![Ablation::NoLogical, Ablation::NoSemantic]);
    }
    match mode.parse()? {
        Ablation::None => Err(lsim::LsimError::Config("ablate needs no_logical, no_semantic or both".into())),
        m => Ok(vec![m]),
    }
}

fn run(pipeline: &Pipeline, command: &Command) -> lsim::Result<Vec<StageReport>> {
    let one = |r: lsim::Result<StageReport>| r.map(|s| vec![s]);
    match command {
        Command::Ingest => one(pipeline.ingest()),
        Command::Split => one(pipeline.split()),
        Command::BuildGraph => one(pipeline.build_graph()),
        Command::ExtractChains => one(pipeline.extract_chains()),
        Command::TrainPolicy => one(pipeline.train_policy()),
        Command::TrainDssm => one(pipeline.train_dssm()),
        Command::Retrieve => one(pipeline.retrieve()),
        Command::Answer { .. } => one(pipeline.answer()),
        Command::Evaluate { .. } => one(pipeline.evaluate()),
        Command::Ablate { mode } => one(pipeline.ablate(&ablation_modes(mode)?)),
        Command::RunAll => pipeline.run_all(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    // config, template and provider problems are usage errors
    let pipeline = match load_config(&cli).and_then(Pipeline::new) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match run(&pipeline, &cli.command) {
        Ok(reports) => {
            for r in reports {
                println!("{}: {}", r.stage, r.summary);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
