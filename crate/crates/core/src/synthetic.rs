//! Seeded synthetic fixtures: a legal-flavoured Q&A corpus that the mock llm
//! can turn into graphs and chains, and two planted learning tasks for the
//! policy and the ranker.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::QaPair;
use crate::dssm::{FeatureVector, TripletExample};
use crate::embedding::EmbeddingVector;
use crate::fact_rule::{ChainOwner, FactRuleChain, FactRuleGraph, NodeKind};

struct Scenario {
    rule: &'static str,
    facts: [&'static str; 4],
    remedy: [&'static str; 2],
}

const SCENARIOS: &[Scenario] = &[
    Scenario { rule: "Fourth Amendment", facts: ["vehicle", "checkpoint", "warrantless", "marijuana"], remedy: ["suppression", "exclusion"] },
    Scenario { rule: "Miranda Rights", facts: ["interrogation", "confession", "detective", "handcuffed"], remedy: ["suppression", "statement"] },
    Scenario { rule: "Speedy Trial Act", facts: ["continuance", "arraignment", "detention", "postponed"], remedy: ["dismissal", "calendar"] },
    Scenario { rule: "Penal Code 1203.4", facts: ["expungement", "probation", "conviction", "employer"], remedy: ["petition", "dismissal"] },
    Scenario { rule: "Stand Your Ground", facts: ["shooting", "intruder", "firearm", "neighbor"], remedy: ["immunity", "hearing"] },
    Scenario { rule: "Criminal Mischief Statute", facts: ["vandalism", "property", "stepson", "graffiti"], remedy: ["restitution", "diversion"] },
    Scenario { rule: "Domestic Violence Act", facts: ["restraining", "girlfriend", "bruises", "apartment"], remedy: ["protective", "counseling"] },
    Scenario { rule: "Habitual Offender Law", facts: ["burglary", "sentencing", "enhancement", "priors"], remedy: ["resentencing", "petition"] },
    Scenario { rule: "Implied Consent Law", facts: ["breathalyzer", "drunk", "license", "refusal"], remedy: ["suspension", "hearing"] },
    Scenario { rule: "Retail Theft Statute", facts: ["shoplifting", "security", "merchandise", "juvenile"], remedy: ["diversion", "restitution"] },
    Scenario { rule: "Controlled Substances Act", facts: ["possession", "fentanyl", "informant", "apartment"], remedy: ["treatment", "suppression"] },
    Scenario { rule: "Parole Revocation Rules", facts: ["parolee", "curfew", "violation", "officer"], remedy: ["hearing", "reinstatement"] },
];

const PLACES: &[&str] = &["California", "Florida", "Texas", "Ohio", "Georgia", "Illinois", "Arizona", "Nevada"];

/// `n` question/answer pairs with ids `q00000..`, drawn from a fixed set of
/// criminal-law scenarios.
pub fn legal_corpus(n: usize, seed: u64) -> Vec<QaPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let s = SCENARIOS.choose(&mut rng).expect("nonempty");
            let place = PLACES.choose(&mut rng).expect("nonempty");
            let mut facts = s.facts;
            facts.shuffle(&mut rng);
            let years = rng.gen_range(1..=9);
            let question = match rng.gen_range(0..3) {
                0 => format!(
                    "In {place}, police found {} during a {} and mentioned {}. Would the {} protect me here? It happened {years} years ago.",
                    facts[0], facts[1], facts[2], s.rule
                ),
                1 => format!(
                    "My brother was charged after a {} involving {}. The {} was never explained to him. How does the {} apply in {place}?",
                    facts[0], facts[1], facts[2], s.rule
                ),
                _ => format!(
                    "I was arrested {years} months ago for {} and {}. Can the {} help me, given the {}?",
                    facts[0], facts[1], s.rule, facts[3]
                ),
            };
            let answer = format!(
                "Under the {}, the {} matters most. Ask your defense attorney about {} and {} before the next court date.",
                s.rule, facts[0], s.remedy[0], s.remedy[1]
            );
            QaPair::new(format!("q{i:05}"), question, answer)
        })
        .collect()
}

const POLICY_FACTS: [&str; 5] = ["arrest", "warrant", "search", "vehicle", "bail"];
const POLICY_RULES: [&str; 5] = ["fourth amendment", "miranda rule", "exclusionary rule", "due process", "speedy trial"];

/// Ten-node graph where fact `i` (`f{i}`) pairs with rule `i` (`r{i}`).
/// Facts form a clique and each fact links to its rule; with `rule_ring` the
/// rules are also joined in a ring, which adds rule-to-rule distractors.
/// The 20 training pairs are every ordered fact pair `[f_i, f_j]` with
/// answer chain `[r_i, r_j]`.
pub fn policy_task(rule_ring: bool) -> (FactRuleGraph, Vec<(FactRuleChain, FactRuleChain)>) {
    let mut g = FactRuleGraph::new();
    for i in 0..5 {
        g.add_node(format!("f{i}"), NodeKind::Fact, POLICY_FACTS[i]).expect("fresh id");
        g.add_node(format!("r{i}"), NodeKind::Rule, POLICY_RULES[i]).expect("fresh id");
    }
    for i in 0..5 {
        for j in i + 1..5 {
            g.add_edge(&format!("f{i}"), &format!("f{j}")).expect("nodes exist");
        }
        if rule_ring {
            g.add_edge(&format!("r{i}"), &format!("r{}", (i + 1) % 5)).expect("nodes exist");
        }
        g.add_edge(&format!("f{i}"), &format!("r{i}")).expect("nodes exist");
    }
    let mut pairs = Vec::new();
    for i in 0..5 {
        for j in 0..5 {
            if i != j {
                pairs.push((
                    FactRuleChain::new(vec![format!("f{i}"), format!("f{j}")], ChainOwner::Question),
                    FactRuleChain::new(vec![format!("r{i}"), format!("r{j}")], ChainOwner::Answer),
                ));
            }
        }
    }
    (g, pairs)
}

/// Which feature half carries the planted topic signal; the other half is
/// pure noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Signal {
    Logical,
    Semantic,
    Both,
}

/// Queries with their own candidate lists. Relevance is the number of topics
/// a candidate shares with its query.
#[derive(Debug, Clone)]
pub struct RankingTask {
    pub features: std::collections::HashMap<String, FeatureVector>,
    /// (query id, [(candidate id, overlap)])
    pub queries: Vec<(String, Vec<(String, usize)>)>,
}

impl RankingTask {
    /// Every (positive, negative) combination with strictly higher overlap
    /// on the positive side, for the given queries.
    pub fn triplets(&self, queries: &[(String, Vec<(String, usize)>)]) -> Vec<TripletExample> {
        let mut out = Vec::new();
        for (q, cands) in queries {
            let best = cands.iter().map(|c| c.1).max().unwrap_or(0);
            for (p, _) in cands.iter().filter(|c| c.1 == best) {
                for (n, _) in cands.iter().filter(|c| c.1 < best) {
                    out.push(TripletExample {
                        query_id: q.clone(),
                        positive_id: p.clone(),
                        negative_id: n.clone(),
                    });
                }
            }
        }
        out
    }
}

/// Items carry 2 of `topics` topics. Each query has one candidate sharing
/// both topics; the rest are random. Topic indicators (scaled, plus
/// Gaussian noise of scale `noise`) fill the signal half(s).
pub fn ranking_task(
    n_queries: usize,
    n_candidates: usize,
    topics: usize,
    signal: Signal,
    noise: f64,
    seed: u64,
) -> RankingTask {
    assert!(topics >= 3 && n_candidates >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = std::collections::HashMap::new();
    let mut queries = Vec::with_capacity(n_queries);
    let draw_topics = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let mut all: Vec<usize> = (0..topics).collect();
        all.shuffle(rng);
        all.truncate(2);
        all.sort();
        all
    };
    let make = |rng: &mut ChaCha8Rng, set: &[usize]| -> FeatureVector {
        let mut half = |carries: bool| {
            let v: Vec<f64> = (0..topics)
                .map(|t| {
                    let base = if carries && set.contains(&t) { 1.0 } else { 0.0 };
                    let e: f64 = StandardNormal.sample(rng);
                    base + noise * e
                })
                .collect();
            EmbeddingVector::new(v).expect("finite")
        };
        let logical = half(matches!(signal, Signal::Logical | Signal::Both));
        let semantic = half(matches!(signal, Signal::Semantic | Signal::Both));
        FeatureVector::new(logical, semantic).expect("equal dims")
    };
    for qi in 0..n_queries {
        let qid = format!("query{qi:04}");
        let qset = draw_topics(&mut rng);
        features.insert(qid.clone(), make(&mut rng, &qset));
        let planted = rng.gen_range(0..n_candidates);
        let mut cands = Vec::with_capacity(n_candidates);
        for ci in 0..n_candidates {
            let cid = format!("{qid}-c{ci:02}");
            let cset = if ci == planted { qset.clone() } else { draw_topics(&mut rng) };
            let overlap = cset.iter().filter(|t| qset.contains(t)).count();
            features.insert(cid.clone(), make(&mut rng, &cset));
            cands.push((cid, overlap));
        }
        queries.push((qid, cands));
    }
    RankingTask { features, queries }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_seeded() {
        assert_eq!(legal_corpus(20, 1), legal_corpus(20, 1));
        assert_ne!(legal_corpus(20, 1), legal_corpus(20, 2));
        let c = legal_corpus(5, 0);
        assert!(c.iter().all(|p| p.validate().is_ok()));
        assert_eq!(c[3].id, "q00003");
    }

    #[test]
    fn policy_task_is_valid() {
        let (g, pairs) = policy_task(false);
        assert_eq!(g.len(), 10);
        assert_eq!(g.edges().len(), 15);
        assert_eq!(policy_task(true).0.edges().len(), 20);
        assert_eq!(pairs.len(), 20);
        for (q, a) in &pairs {
            q.validate(&g).unwrap();
            assert!(a.node_ids.iter().all(|n| !q.contains(n)));
        }
    }

    #[test]
    fn ranking_task_shape() {
        let t = ranking_task(3, 5, 6, Signal::Logical, 0.1, 0);
        assert_eq!(t.queries.len(), 3);
        assert_eq!(t.features.len(), 3 * 6);
        for (_, cands) in &t.queries {
            assert_eq!(cands.iter().map(|c| c.1).max(), Some(2));
        }
        assert!(!t.triplets(&t.queries).is_empty());
    }
}
