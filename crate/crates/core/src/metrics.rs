//! Automatic answer evaluation: ROUGE-1/2/L (F1), exact-match METEOR and a
//! sentence-embedding cosine standing in for BERTScore.
//!
//! METEOR here has no stemming or synonym stages, so scores are comparable
//! only with other runs of this crate. The BERTScore stand-in is always
//! reported as `bertscore_proxy`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_similarity, TextEncoder};
use crate::error::{LsimError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn joined(&self) -> String {
        self.tokens.join(" ")
    }
}

impl<S: Into<String>> FromIterator<S> for TokenSequence {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Self {
            tokens: iter.into_iter().map(Into::into).collect(),
        }
    }
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> TokenSequence {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(hits: usize, cand_total: usize, ref_total: usize) -> Self {
        let precision = if cand_total == 0 { 0.0 } else { hits as f64 / cand_total as f64 };
        let recall = if ref_total == 0 { 0.0 } else { hits as f64 / ref_total as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// ROUGE-N with clipped n-gram counts.
pub fn rouge_n(candidate: &TokenSequence, reference: &TokenSequence, n: usize) -> Prf {
    assert!(n >= 1, "rouge_n requires n >= 1");
    let cand = ngram_counts(&candidate.tokens, n);
    let refs = ngram_counts(&reference.tokens, n);
    let hits = cand
        .iter()
        .map(|(gram, c)| refs.get(gram).map_or(0, |r| (*c).min(*r)))
        .sum();
    let total = |len: usize| len.saturating_sub(n - 1);
    Prf::from_counts(hits, total(candidate.len()), total(reference.len()))
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(candidate: &TokenSequence, reference: &TokenSequence) -> Prf {
    let l = lcs_len(&candidate.tokens, &reference.tokens);
    Prf::from_counts(l, candidate.len(), reference.len())
}

/// Exact-match METEOR.
///
/// Candidate tokens are aligned left to right, each to the first unused equal
/// reference token. `F_mean = 10PR / (R + 9P)`, the fragmentation penalty is
/// `0.5 * (chunks / matches)^3`.
pub fn meteor(candidate: &TokenSequence, reference: &TokenSequence) -> f64 {
    let mut used = vec![false; reference.len()];
    let mut alignment = Vec::new();
    for (ci, tok) in candidate.tokens.iter().enumerate() {
        if let Some(ri) = (0..reference.len()).find(|&ri| !used[ri] && reference.tokens[ri] == *tok) {
            used[ri] = true;
            alignment.push((ci, ri));
        }
    }
    let m = alignment.len();
    if m == 0 {
        return 0.0;
    }
    let chunks = 1 + alignment
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f_mean * (1.0 - penalty)
}

/// Cosine between sentence embeddings; 0 when either side is blank.
pub fn bertscore_proxy(candidate: &str, reference: &str, encoder: &dyn TextEncoder) -> Result<f64> {
    if candidate.trim().is_empty() || reference.trim().is_empty() {
        return Ok(0.0);
    }
    let a = encoder.encode(candidate)?;
    let b = encoder.encode(reference)?;
    cosine_similarity(&a, &b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScores {
    pub id: String,
    pub meteor: f64,
    pub rouge1_f: f64,
    pub rouge2_f: f64,
    #[serde(rename = "rougeL_f")]
    pub rouge_l_f: f64,
    pub bertscore_proxy: f64,
}

/// Aggregates are percentages (mean of per-example fractions times 100).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub meteor: f64,
    pub rouge1_f: f64,
    pub rouge2_f: f64,
    #[serde(rename = "rougeL_f")]
    pub rouge_l_f: f64,
    pub bertscore_proxy: f64,
    pub per_example: Vec<ExampleScores>,
}

pub fn score_example(id: &str, prediction: &str, reference: &str, encoder: &dyn TextEncoder) -> Result<ExampleScores> {
    let cand = tokenize(prediction);
    let refs = tokenize(reference);
    Ok(ExampleScores {
        id: id.to_string(),
        meteor: meteor(&cand, &refs),
        rouge1_f: rouge_n(&cand, &refs, 1).f1,
        rouge2_f: rouge_n(&cand, &refs, 2).f1,
        rouge_l_f: rouge_l(&cand, &refs).f1,
        bertscore_proxy: bertscore_proxy(prediction, reference, encoder)?,
    })
}

/// Scores predictions against references keyed by id; the id sets must match.
/// Per-example rows are ordered by id.
pub fn evaluate_run(
    predictions: &[(String, String)],
    references: &[(String, String)],
    encoder: &dyn TextEncoder,
) -> Result<MetricsReport> {
    let preds: BTreeMap<&str, &str> = predictions.iter().map(|(i, t)| (i.as_str(), t.as_str())).collect();
    let refs: BTreeMap<&str, &str> = references.iter().map(|(i, t)| (i.as_str(), t.as_str())).collect();
    if preds.len() != predictions.len() || refs.len() != references.len() {
        return Err(LsimError::InvalidInput("duplicate ids in evaluation input".into()));
    }
    if !preds.keys().eq(refs.keys()) {
        let missing: Vec<_> = refs.keys().filter(|k| !preds.contains_key(*k)).collect();
        let extra: Vec<_> = preds.keys().filter(|k| !refs.contains_key(*k)).collect();
        return Err(LsimError::InvalidInput(format!(
            "prediction/reference id mismatch: missing {missing:?}, unexpected {extra:?}"
        )));
    }
    let per_example: Vec<ExampleScores> = refs
        .par_iter()
        .map(|(id, reference)| score_example(id, preds[id], reference, encoder))
        .collect::<Result<_>>()?;
    Ok(MetricsReport::from_examples(per_example))
}

impl MetricsReport {
    pub fn from_examples(per_example: Vec<ExampleScores>) -> Self {
        let n = per_example.len().max(1) as f64;
        let mean = |f: fn(&ExampleScores) -> f64| 100.0 * per_example.iter().map(f).sum::<f64>() / n;
        Self {
            meteor: mean(|e| e.meteor),
            rouge1_f: mean(|e| e.rouge1_f),
            rouge2_f: mean(|e| e.rouge2_f),
            rouge_l_f: mean(|e| e.rouge_l_f),
            bertscore_proxy: mean(|e| e.bertscore_proxy),
            per_example,
        }
    }

    /// Element-wise mean of several reports' aggregates (repeated runs).
    pub fn mean_of(reports: &[MetricsReport]) -> Option<MetricsReport> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(MetricsReport {
            meteor: avg(|r| r.meteor),
            rouge1_f: avg(|r| r.rouge1_f),
            rouge2_f: avg(|r| r.rouge2_f),
            rouge_l_f: avg(|r| r.rouge_l_f),
            bertscore_proxy: avg(|r| r.bertscore_proxy),
            per_example: first.per_example.clone(),
        })
    }

    pub fn table_row(&self, method: &str) -> String {
        format!(
            "{:<24} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>16.2}",
            method, self.meteor, self.rouge1_f, self.rouge2_f, self.rouge_l_f, self.bertscore_proxy
        )
    }

    pub fn write_per_example(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for row in &self.per_example {
            serde_json::to_writer(&mut out, row)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn table_header() -> String {
    format!(
        "{:<24} {:>8} {:>8} {:>8} {:>8} {:>16}",
        "Method", "METEOR", "ROUGE-1", "ROUGE-2", "ROUGE-L", "BERTScore(proxy)"
    )
}

/// Aggregate table, one row per `(method, report)`, two-decimal percentages.
pub fn format_table(rows: &[(&str, &MetricsReport)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", table_header());
    for (method, report) in rows {
        let _ = writeln!(out, "{}", report.table_row(method));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashEncoder;

    fn seq(s: &str) -> TokenSequence {
        s.split_whitespace().collect()
    }

    #[test]
    fn tokenize_rule() {
        assert_eq!(tokenize("The cat, sat.").tokens, vec!["the", "cat", "sat"]);
        assert!(tokenize("").is_empty());
        let once = tokenize("Don't PANIC -- it's fine!");
        assert_eq!(tokenize(&once.joined()), once);
    }

    #[test]
    fn rouge_n_examples() {
        let a = seq("the cat sat");
        assert_eq!(rouge_n(&a, &a, 1), Prf { precision: 1.0, recall: 1.0, f1: 1.0 });
        assert_eq!(rouge_n(&seq("a b"), &seq("c d"), 1), Prf::default());
        let p = rouge_n(&seq("the cat"), &seq("the cat sat"), 1);
        assert!((p.precision - 1.0).abs() < 1e-12);
        assert!((p.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((p.f1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn rouge_n_clips_repeats() {
        let p = rouge_n(&seq("the the the"), &seq("the cat"), 1);
        assert!((p.precision - 1.0 / 3.0).abs() < 1e-12);
        assert!((p.recall - 0.5).abs() < 1e-12);
        assert_eq!(rouge_n(&seq("a"), &seq("a"), 2), Prf::default());
    }

    #[test]
    fn rouge_l_examples() {
        let a = seq("a b c d");
        assert_eq!(rouge_l(&a, &a).f1, 1.0);
        let p = rouge_l(&seq("a b c d"), &seq("a c b d"));
        assert_eq!((p.precision, p.recall, p.f1), (0.75, 0.75, 0.75));
        assert_eq!(rouge_l(&TokenSequence::default(), &a), Prf::default());
    }

    #[test]
    fn meteor_examples() {
        let a = seq("w x y z");
        assert!((meteor(&a, &a) - 0.9921875).abs() < 1e-12);
        assert_eq!(meteor(&seq("a b"), &seq("c d")), 0.0);
        assert!((meteor(&seq("a"), &seq("a")) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn meteor_chunks() {
        // matches a->0, b->1 (one chunk), d->3 (new chunk): m=3, ch=2
        let cand = seq("a b x d");
        let refs = seq("a b c d");
        let (p, r) = (0.75, 0.75);
        let fmean = 10.0 * p * r / (r + 9.0 * p);
        let expected = fmean * (1.0 - 0.5 * (2.0f64 / 3.0).powi(3));
        assert!((meteor(&cand, &refs) - expected).abs() < 1e-12);
    }

    #[test]
    fn bertscore_proxy_props() {
        let enc = HashEncoder::new(64, 0);
        let s = bertscore_proxy("hire a lawyer now", "hire a lawyer now", &enc).unwrap();
        assert!((s - 1.0).abs() < 1e-9);
        let ab = bertscore_proxy("remain silent", "hire an attorney", &enc).unwrap();
        let ba = bertscore_proxy("hire an attorney", "remain silent", &enc).unwrap();
        assert_eq!(ab, ba);
        assert_eq!(bertscore_proxy("", "x", &enc).unwrap(), 0.0);
    }

    #[test]
    fn bertscore_proxy_frozen_value() {
        let enc = HashEncoder::new(128, 0);
        let cand = "You should remain silent and hire a criminal defense attorney.";
        let refr = "Keep your mouth shut and hire a competent attorney today.";
        let s = bertscore_proxy(cand, refr, &enc).unwrap();
        // oracle: cosine of the summed single-token encodings
        let summed = |text: &str| {
            let mut acc = vec![0.0; 128];
            for tok in tokenize(text).tokens {
                let v = enc.encode(&tok).unwrap();
                acc.iter_mut().zip(v.values()).for_each(|(a, b)| *a += b);
            }
            acc
        };
        let (a, b) = (summed(cand), summed(refr));
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let oracle = dot / (norm(&a) * norm(&b));
        assert!((s - oracle).abs() < 1e-12, "{s} vs {oracle}");
        assert!((s - FROZEN_PROXY).abs() < 1e-12, "{s}");
    }

    // HashEncoder(dim 128, seed 0)
    const FROZEN_PROXY: f64 = 0.3174714942347729;

    fn pairs(v: &[(&str, &str)]) -> Vec<(String, String)> {
        v.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn evaluate_run_cases() {
        let enc = HashEncoder::new(32, 0);
        let refs = pairs(&[("1", "the cat sat"), ("2", "hire a lawyer")]);
        let r = evaluate_run(&refs, &refs, &enc).unwrap();
        assert!((r.rouge1_f - 100.0).abs() < 1e-9);
        assert_eq!(format!("{:.2}", r.rouge1_f), "100.00");

        let r = evaluate_run(&pairs(&[("1", "the cat")]), &pairs(&[("1", "the cat sat")]), &enc).unwrap();
        assert_eq!(format!("{:.2}", r.rouge1_f), "80.00");

        let r = evaluate_run(&pairs(&[("1", "the cat sat"), ("2", "")]), &refs, &enc).unwrap();
        let two = r.per_example.iter().find(|e| e.id == "2").unwrap();
        assert_eq!((two.rouge1_f, two.meteor, two.bertscore_proxy), (0.0, 0.0, 0.0));
        assert!((r.rouge1_f - 50.0).abs() < 1e-9);

        assert!(evaluate_run(&pairs(&[("1", "x")]), &refs, &enc).is_err());
    }

    #[test]
    fn aggregate_is_mean_of_examples() {
        let enc = HashEncoder::new(32, 0);
        let refs = pairs(&[("a", "one two three four"), ("b", "five six"), ("c", "seven eight nine")]);
        let preds = pairs(&[("a", "one three four"), ("b", "six five"), ("c", "nine")]);
        let r = evaluate_run(&preds, &refs, &enc).unwrap();
        let n = r.per_example.len() as f64;
        let mean_meteor = r.per_example.iter().map(|e| e.meteor).sum::<f64>() / n * 100.0;
        assert!((r.meteor - mean_meteor).abs() < 1e-12);
        let mean_l = r.per_example.iter().map(|e| e.rouge_l_f).sum::<f64>() / n * 100.0;
        assert!((r.rouge_l_f - mean_l).abs() < 1e-12);
    }

    #[test]
    fn table_layout() {
        let r = MetricsReport::from_examples(vec![ExampleScores {
            id: "x".into(),
            meteor: 0.21,
            rouge1_f: 0.163,
            rouge2_f: 0.0263,
            rouge_l_f: 0.1474,
            bertscore_proxy: 0.8323,
        }]);
        let table = format_table(&[("LSIM", &r)]);
        let lines: Vec<_> = table.lines().collect();
        assert!(lines[0].starts_with("Method"));
        assert!(lines[1].contains("21.00") && lines[1].contains("16.30") && lines[1].contains("83.23"));
    }
}
