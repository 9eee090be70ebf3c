//! CMC and mAP on a hand-made gallery, with and without same-camera filtering.
//!
//! cargo run --example retrieval_metrics

use hpl_reid::evaluator::{
    camera_exclusion, chance_rank1, cosine_scores, identity_relevance, retrieval_metrics,
};

fn main() -> hpl_reid::Result<()> {
    // Two queries; identities 1 and 2 each appear twice in the gallery. Filtering drops
    // query 1's same-camera match, which lets the id 3 distractor take the top rank.
    let queries = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
    let gallery = vec![
        vec![0.9, 0.1, 0.0],  // id 1, cam 0
        vec![0.7, 0.0, 0.7],  // id 1, cam 1
        vec![0.1, 0.95, 0.0], // id 2, cam 0
        vec![0.8, 0.1, 0.4],  // id 3, cam 1
        vec![0.0, 0.6, 0.8],  // id 2, cam 1
    ];
    let (q_ids, q_cams) = (vec![1u64, 2], vec![0usize, 0]);
    let (g_ids, g_cams) = (vec![1u64, 1, 2, 3, 2], vec![0usize, 1, 0, 1, 1]);

    let scores = cosine_scores(&queries, &gallery);
    let relevant = identity_relevance(&q_ids, &g_ids);
    let plain = retrieval_metrics("unfiltered", &scores, &relevant, None)?;
    let excluded = camera_exclusion(&q_ids, &q_cams, &g_ids, &g_cams);
    let filtered = retrieval_metrics("camera-filtered", &scores, &relevant, Some(&excluded))?;

    for r in [&plain, &filtered] {
        println!(
            "{}: rank1 {:.3} rank5 {:.3} mAP {:.3} per-query AP {:?} ({} queries, {} skipped)",
            r.task, r.rank1, r.rank5, r.map, r.per_query_ap, r.n_queries, r.skipped
        );
    }
    println!(
        "random ranking would give rank1 {:.3} / {:.3}",
        chance_rank1(&relevant, None),
        chance_rank1(&relevant, Some(&excluded))
    );
    Ok(())
}
