#![allow(dead_code)]

use std::path::{Path, PathBuf};

use lsim::data::write_dataset;
use lsim::pipeline::RunConfig;
use lsim::synthetic::legal_corpus;

/// Small, fast settings for running every stage in tests.
pub fn light_config(dir: &Path, pairs: usize) -> RunConfig {
    std::fs::create_dir_all(dir).unwrap();
    let dataset = dir.join("input.jsonl");
    write_dataset(&dataset, &legal_corpus(pairs, 7)).unwrap();
    let mut c = RunConfig::default();
    c.paths.dataset = dataset;
    c.paths.run_dir = dir.join("run");
    c.encoder.dim = 32;
    c.policy.hidden_widths = vec![16, 8];
    c.policy.epochs = 3;
    c.dssm.hidden_widths = vec![16, 8, 4];
    c.dssm.epochs = 3;
    c.dssm.pool_size = 6;
    c
}

pub fn light_toml(dir: &Path, pairs: usize) -> PathBuf {
    let c = light_config(dir, pairs);
    let path = dir.join("config.toml");
    std::fs::write(&path, c.to_toml()).unwrap();
    path
}

/// Every file under `root` as (relative path, bytes), sorted.
pub fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
