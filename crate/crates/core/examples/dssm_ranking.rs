//! Trains the DSSM ranker with the margin loss on a planted-overlap ranking
//! task and compares it with plain cosine retrieval.
//!
//! With noise 0.3 and 80 training queries the ranker drives the training
//! loss to zero but overfits; cosine is a strong baseline on this task.
//! Lower the noise or add queries to see the gap close.
//!
//!     cargo run --release --example dssm_ranking

use lsim::dssm::{cosine_topk, retrieve_topk, train_dssm, DssmConfig, FeatureVector};
use lsim::embedding::EmbeddingVector;
use lsim::synthetic::{ranking_task, Signal};

fn main() -> lsim::Result<()> {
    let task = ranking_task(100, 20, 8, Signal::Both, 0.3, 3);
    let (train, held) = task.queries.split_at(80);
    let config = DssmConfig {
        hidden_widths: vec![32, 16, 8],
        ..DssmConfig::default()
    };
    let trained = train_dssm(&task.triplets(train), &task.features, &config)?;
    println!("loss: epoch 1 {:.4}, epoch {} {:.4}", trained.history[0].mean_loss, config.epochs, trained.history.last().unwrap().mean_loss);

    let (mut dssm_hits, mut cosine_hits) = (0, 0);
    for (q, cands) in held {
        let best = cands.iter().map(|c| c.1).max().unwrap_or(0);
        let overlap = |id: &str| cands.iter().find(|c| c.0 == id).map_or(0, |c| c.1);
        let db: Vec<(String, FeatureVector)> = cands.iter().map(|(c, _)| (c.clone(), task.features[c].clone())).collect();
        let top = retrieve_topk(&task.features[q], &db, &trained.model, 1)?;
        dssm_hits += usize::from(overlap(&top[0].candidate_id) == best);

        let flat = |f: &FeatureVector| EmbeddingVector::new(f.combined());
        let cos_db = db.iter().map(|(id, f)| Ok((id.clone(), flat(f)?))).collect::<lsim::Result<Vec<_>>>()?;
        let top = cosine_topk(&flat(&task.features[q])?, &cos_db, 1)?;
        cosine_hits += usize::from(overlap(&top[0].candidate_id) == best);
    }
    let n = held.len() as f64;
    println!("held-out top-1: dssm {:.2}, cosine {:.2}", dssm_hits as f64 / n, cosine_hits as f64 / n);
    Ok(())
}
