mod common;

use std::process::{Command, Output};

fn lsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lsim"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&lsim(&[])), 1);
    assert_eq!(code(&lsim(&["frobnicate"])), 1);
    assert_eq!(code(&lsim(&["split", "--seed", "abc"])), 1);
    assert_eq!(code(&lsim(&["ablate", "--mode", "sideways"])), 1);
    assert_eq!(code(&lsim(&["--config", "/no/such/config.toml", "split"])), 1);
}

#[test]
fn help_and_version_exit_0() {
    let help = lsim(&["--help"]);
    assert_eq!(code(&help), 0);
    let text = String::from_utf8_lossy(&help.stdout);
    for cmd in [
        "ingest", "split", "build-graph", "extract-chains", "train-policy", "train-dssm", "retrieve", "answer",
        "evaluate", "ablate", "run-all",
    ] {
        assert!(text.contains(cmd), "help lacks {cmd}");
    }
    assert_eq!(code(&lsim(&["--version"])), 0);
}

#[test]
fn bad_config_value_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "k = 0\n").unwrap();
    assert_eq!(code(&lsim(&["--config", cfg.to_str().unwrap(), "split"])), 1);
    std::fs::write(&cfg, "llm = \"remote\"\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_lsim"))
        .args(["--config", cfg.to_str().unwrap(), "split"])
        .env_remove("LLM_ENDPOINT")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("LLM_ENDPOINT"));
}

#[test]
fn stage_failures_exit_2_and_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let missing = dir.path().join("absent.jsonl");
    let o = lsim(&["--run-dir", run.to_str().unwrap(), "--dataset", missing.to_str().unwrap(), "ingest"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent.jsonl"));

    let o = lsim(&["--run-dir", run.to_str().unwrap(), "retrieve"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("dssm.ckpt"));

}

#[test]
fn run_all_then_stages_succeed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::light_toml(dir.path(), 60);
    let cfg = cfg.to_str().unwrap();
    let o = lsim(&["--config", cfg, "run-all"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("evaluate: METEOR"), "{out}");
    let run = dir.path().join("run");
    assert!(run.join("metrics.json").exists());

    assert_eq!(code(&lsim(&["--config", cfg, "answer", "--repeats", "2"])), 0);
    assert!(run.join("answers/repeat_1.jsonl").exists());
    assert_eq!(code(&lsim(&["--config", cfg, "evaluate", "--repeats", "2"])), 0);
    let o = lsim(&["--config", cfg, "ablate", "--mode", "no_semantic"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(run.join("ablation_table.txt")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).map(|l| l.split("  ").next().unwrap().trim()).collect();
    assert_eq!(rows, ["LSIM", "LSIM w/o SI"]);
}
