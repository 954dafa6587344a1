//! Question/answer records, line-delimited dataset I/O and the two-stage
//! database/train/test split.
//!
//! Dataset files hold one JSON object per line:
//!
//! ```text
//! {"id":"1","question":"...","answer":"...","location":"California"}
//! ```
//!
//! `location` is optional. Blank lines are ignored.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{LsimError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub id: String,
    #[serde(rename = "question")]
    pub question_text: String,
    #[serde(rename = "answer")]
    pub answer_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<String>,
}

impl QaPair {
    pub fn new(id: impl Into<String>, question: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            question_text: question.into(),
            answer_text: answer.into(),
            location: None,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if self.question_text.trim().is_empty() {
            return Err("empty question".into());
        }
        if self.answer_text.trim().is_empty() {
            return Err("empty answer".into());
        }
        Ok(())
    }
}

/// Database (retrieval pool), training and test partitions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataSplits {
    pub database: Vec<QaPair>,
    pub train: Vec<QaPair>,
    pub test: Vec<QaPair>,
}

impl DataSplits {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.database.len(), self.train.len(), self.test.len())
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<QaPair>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(LsimError::MissingFile(path.to_path_buf()));
    }
    let reader = BufReader::new(File::open(path)?);
    let mut seen = HashSet::new();
    let mut pairs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| LsimError::MalformedRecord {
            path: path.to_path_buf(),
            line: line_no,
            reason,
        };
        let pair: QaPair = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        pair.validate().map_err(malformed)?;
        if !seen.insert(pair.id.clone()) {
            return Err(LsimError::DuplicateId {
                id: pair.id,
                line: line_no,
            });
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn write_dataset(path: impl AsRef<Path>, pairs: &[QaPair]) -> Result<()> {
    write_jsonl(path, pairs)
}

/// One JSON value per line.
pub fn write_jsonl<'a, T: Serialize + 'a>(path: impl AsRef<Path>, items: impl IntoIterator<Item = &'a T>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a line-delimited JSON artifact; blank lines are skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(LsimError::MissingArtifact(path.to_path_buf()));
    }
    let reader = BufReader::new(File::open(path)?);
    let mut items = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line).map_err(|e| LsimError::MalformedRecord {
            path: path.to_path_buf(),
            line: idx + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(items)
}

/// Partition sizes for `total` records: the database takes `floor(0.8 * total)`,
/// the remainder is split again with the train side taking the floor.
pub fn split_sizes(total: usize) -> (usize, usize, usize) {
    let database = total * 4 / 5;
    let rest = total - database;
    let train = rest * 4 / 5;
    (database, train, rest - train)
}

/// Seeded shuffle followed by the 8:2 / 8:2 partition.
pub fn split_dataset(pairs: &[QaPair], seed: u64) -> Result<DataSplits> {
    let (n_db, n_train, n_test) = split_sizes(pairs.len());
    if n_db == 0 || n_train == 0 || n_test == 0 {
        return Err(LsimError::InvalidInput(format!(
            "{} records cannot form three nonempty splits",
            pairs.len()
        )));
    }
    let mut shuffled = pairs.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = shuffled.split_off(n_db + n_train);
    let train = shuffled.split_off(n_db);
    Ok(DataSplits {
        database: shuffled,
        train,
        test,
    })
}
