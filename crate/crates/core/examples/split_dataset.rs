//! Seeded database/train/test split of a line-delimited dataset.
//!
//!     cargo run --example split_dataset -- [dataset.jsonl] [seed]
//!
//! Without a path, splits a synthetic 16,190-record corpus.

use lsim::data::{load_dataset, split_dataset, split_sizes};
use lsim::synthetic::legal_corpus;

fn main() -> lsim::Result<()> {
    let mut args = std::env::args().skip(1);
    let pairs = match args.next() {
        Some(path) => load_dataset(path)?,
        None => legal_corpus(16_190, 0),
    };
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));
    let splits = split_dataset(&pairs, seed)?;
    let (d, tr, te) = splits.sizes();
    assert_eq!((d, tr, te), split_sizes(pairs.len()));
    println!("{} records, seed {seed}: database {d}, train {tr}, test {te}", pairs.len());
    println!("first test question: {}", splits.test[0].question_text);
    Ok(())
}
