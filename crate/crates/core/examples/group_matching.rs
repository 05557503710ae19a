//! Group matching versus one global matching.
//!
//! Two datasets call the same object "football" and "soccer". With class
//! groups, a "soccer" ground truth can only take a "soccer" query, so the
//! "football" queries never have to learn to reject it.

use taxodet::geometry::Bbox;
use taxodet::losses::FocalConfig;
use taxodet::matching::{match_group, match_standard, GroundTruth, MatchWeights, ScoredQuery, StandardPrediction};

fn main() -> taxodet::Result<()> {
    let (football, soccer) = (0, 1);
    let ball = Bbox::new(0.4, 0.6, 0.2, 0.2)?;
    let near = Bbox::new(0.42, 0.6, 0.22, 0.2)?;
    let far = Bbox::new(0.8, 0.2, 0.2, 0.2)?;
    let queries = [
        ScoredQuery { class_id: football, score: 0.9, bbox: near },
        ScoredQuery { class_id: football, score: 0.2, bbox: far },
        ScoredQuery { class_id: soccer, score: 0.3, bbox: far },
        ScoredQuery { class_id: soccer, score: 0.4, bbox: Bbox::new(0.5, 0.55, 0.3, 0.3)? },
    ];
    let gts = [GroundTruth { class_id: soccer, bbox: ball }];
    let (w, cfg) = (MatchWeights::default(), FocalConfig::default());

    let grouped = match_group(&queries, &gts, &w, &cfg)?;
    for (g, q) in grouped.pairs() {
        println!("group matching: soccer ground truth {g} -> query {q} (class {})", queries[q].class_id);
    }

    // The global matcher sees K-way probabilities. Aliased names look alike,
    // so the best-placed football query scores high on soccer too.
    let preds: Vec<StandardPrediction> = queries
        .iter()
        .map(|q| {
            let p = if q.class_id == football { [q.score, q.score * 0.95] } else { [q.score * 0.95, q.score] };
            StandardPrediction { probs: p.to_vec(), bbox: q.bbox }
        })
        .collect();
    let standard = match_standard(&preds, &gts, &w, &cfg)?;
    for (g, q) in &standard.pairs {
        println!("standard matching: soccer ground truth {g} -> query {q} (class {})", queries[*q].class_id);
    }
    Ok(())
}
