//! Retrieval metrics: CMC Rank-k and mean average precision.
//!
//! Ranking is done in `f64` with a stable sort on descending score, so ties keep
//! gallery order.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::pixels_from_rgb;
use crate::data::{LoadedDataset, Split, TrainingData};
use crate::error::{Error, Result};
use crate::model::HplModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub task: String,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub n_queries: usize,
    pub n_gallery: usize,
    /// Queries without any positive left after filtering.
    pub skipped: usize,
    /// Average precision of every evaluated query, in query order.
    #[serde(skip)]
    pub per_query_ap: Vec<f64>,
}

/// Mean over positive ranks `k` of (positives within the first `k`) / `k`.
pub fn average_precision(relevance: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevance.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::Evaluation(
            "average precision is undefined without positives".into(),
        ));
    }
    Ok(sum / hits as f64)
}

/// Gallery indices by descending score; equal scores keep their original order.
pub fn rank_gallery(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Metrics from a query-by-gallery score matrix.
///
/// `relevant[q][g]` marks positives; `excluded[q][g]` removes items from the
/// ranking of query `q` before scoring.
pub fn retrieval_metrics(
    task: &str,
    scores: &[Vec<f64>],
    relevant: &[Vec<bool>],
    excluded: Option<&[Vec<bool>]>,
) -> Result<RetrievalResult> {
    let n_gallery = scores.first().map(Vec::len).unwrap_or(0);
    if scores.len() != relevant.len() || excluded.is_some_and(|e| e.len() != scores.len()) {
        return Err(Error::Input(
            "score, relevance and exclusion rows differ in count".into(),
        ));
    }
    let (mut r1, mut r5, mut r10) = (0usize, 0usize, 0usize);
    let mut aps = Vec::with_capacity(scores.len());
    let mut skipped = 0;
    for (q, row) in scores.iter().enumerate() {
        if row.len() != n_gallery || relevant[q].len() != n_gallery {
            return Err(Error::Input(format!(
                "query {q} row length differs from gallery size {n_gallery}"
            )));
        }
        let ranked: Vec<bool> = rank_gallery(row)
            .into_iter()
            .filter(|&g| !excluded.is_some_and(|e| e[q][g]))
            .map(|g| relevant[q][g])
            .collect();
        let Some(first) = ranked.iter().position(|&r| r) else {
            skipped += 1;
            continue;
        };
        r1 += usize::from(first < 1);
        r5 += usize::from(first < 5);
        r10 += usize::from(first < 10);
        aps.push(average_precision(&ranked)?);
    }
    let n = aps.len();
    if n == 0 {
        return Err(Error::Evaluation(format!(
            "{task}: none of {} queries has a positive gallery item",
            scores.len()
        )));
    }
    let frac = |c: usize| c as f64 / n as f64;
    Ok(RetrievalResult {
        task: task.to_string(),
        rank1: frac(r1),
        rank5: frac(r5),
        rank10: frac(r10),
        map: aps.iter().sum::<f64>() / n as f64,
        n_queries: n,
        n_gallery,
        skipped,
        per_query_ap: aps,
    })
}

/// Expected Rank-1 of a uniformly random ranking: mean over scorable queries of
/// positives / candidates after exclusion.
pub fn chance_rank1(relevant: &[Vec<bool>], excluded: Option<&[Vec<bool>]>) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (q, row) in relevant.iter().enumerate() {
        let keep = |g: usize| !excluded.is_some_and(|e| e[q][g]);
        let candidates = (0..row.len()).filter(|&g| keep(g)).count();
        let pos = (0..row.len()).filter(|&g| keep(g) && row[g]).count();
        if pos > 0 {
            total += pos as f64 / candidates as f64;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Cosine similarity matrix between two sets of row vectors.
pub fn cosine_scores(queries: &[Vec<f64>], gallery: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let norm = |v: &Vec<f64>| -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter().map(|x| x / n).collect()
    };
    let g: Vec<Vec<f64>> = gallery.iter().map(norm).collect();
    queries
        .iter()
        .map(|q| {
            let q = norm(q);
            g.iter()
                .map(|r| r.iter().zip(&q).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect()
}

/// Same-identity, same-camera gallery items per query.
pub fn camera_exclusion(
    q_ids: &[u64],
    q_cams: &[usize],
    g_ids: &[u64],
    g_cams: &[usize],
) -> Vec<Vec<bool>> {
    q_ids
        .iter()
        .zip(q_cams)
        .map(|(qi, qc)| {
            g_ids
                .iter()
                .zip(g_cams)
                .map(|(gi, gc)| gi == qi && gc == qc)
                .collect()
        })
        .collect()
}

pub fn identity_relevance(q_ids: &[u64], g_ids: &[u64]) -> Vec<Vec<bool>> {
    q_ids
        .iter()
        .map(|q| g_ids.iter().map(|g| g == q).collect())
        .collect()
}

fn rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_vec2::<f64>()?)
}

/// Image embeddings `(cls_t2i, cls_i2i)` for the given images, in chunks.
fn embed_images(
    model: &HplModel,
    set: &LoadedDataset,
    idx: &[usize],
    batch: usize,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let [h, w] = set.image_size;
    let (mut t2i, mut i2i) = (Vec::new(), Vec::new());
    for chunk in idx.chunks(batch.max(1)) {
        let px: Vec<&[u8]> = chunk
            .iter()
            .map(|&i| set.images[i].pixels.as_slice())
            .collect();
        let (a, b) = model.embed_images(&pixels_from_rgb(&px, h, w, &candle_core::Device::Cpu)?)?;
        t2i.extend(rows(&a)?);
        i2i.extend(rows(&b)?);
    }
    Ok((t2i, i2i))
}

/// Image-to-image retrieval on the I2I test split, using the I2I class embedding.
pub fn evaluate_i2i(
    model: &HplModel,
    data: &TrainingData,
    batch: usize,
) -> Result<RetrievalResult> {
    let set = &data.i2i;
    let (q, g) = (set.indices_in(Split::Query), set.indices_in(Split::Gallery));
    if q.is_empty() || g.is_empty() {
        return Err(Error::Evaluation(format!(
            "{} has no query or gallery split",
            set.name
        )));
    }
    let (_, qf) = embed_images(model, set, &q, batch)?;
    let (_, gf) = embed_images(model, set, &g, batch)?;
    let ids = |ix: &[usize]| {
        ix.iter()
            .map(|&i| set.images[i].raw_identity)
            .collect::<Vec<_>>()
    };
    let cams = |ix: &[usize]| ix.iter().map(|&i| set.images[i].camera).collect::<Vec<_>>();
    let relevant = identity_relevance(&ids(&q), &ids(&g));
    let excluded = camera_exclusion(&ids(&q), &cams(&q), &ids(&g), &cams(&g));
    retrieval_metrics("i2i", &cosine_scores(&qf, &gf), &relevant, Some(&excluded))
}

/// Caption queries (every caption of every T2I gallery image) against the T2I gallery images.
pub fn evaluate_t2i(
    model: &HplModel,
    data: &TrainingData,
    batch: usize,
) -> Result<RetrievalResult> {
    let set = &data.t2i;
    let g = set.indices_in(Split::Gallery);
    let mut captions = Vec::new();
    let mut q_ids = Vec::new();
    for i in set
        .indices_in(Split::Query)
        .into_iter()
        .chain(g.iter().copied())
    {
        for c in &set.images[i].captions {
            captions.push(c.clone());
            q_ids.push(set.images[i].raw_identity);
        }
    }
    if captions.is_empty() || g.is_empty() {
        return Err(Error::Evaluation(format!(
            "{} has no caption queries or gallery",
            set.name
        )));
    }
    let g_ids: Vec<u64> = g.iter().map(|&i| set.images[i].raw_identity).collect();
    if let Some(missing) = q_ids.iter().find(|q| !g_ids.contains(q)) {
        return Err(Error::Data(format!(
            "caption query references identity {missing} absent from the gallery"
        )));
    }
    let (gf, _) = embed_images(model, set, &g, batch)?;
    let mut qf = Vec::new();
    for chunk in captions.chunks(batch.max(1)) {
        qf.extend(rows(&model.embed_captions(chunk)?)?);
    }
    retrieval_metrics(
        "t2i",
        &cosine_scores(&qf, &gf),
        &identity_relevance(&q_ids, &g_ids),
        None,
    )
}

/// Random-ranking Rank-1 of the I2I and T2I test protocols, `(i2i, t2i)`.
pub fn chance_levels(data: &TrainingData) -> (f64, f64) {
    let set = &data.i2i;
    let (q, g) = (set.indices_in(Split::Query), set.indices_in(Split::Gallery));
    let ids = |s: &LoadedDataset, ix: &[usize]| {
        ix.iter()
            .map(|&i| s.images[i].raw_identity)
            .collect::<Vec<_>>()
    };
    let cams = |ix: &[usize]| ix.iter().map(|&i| set.images[i].camera).collect::<Vec<_>>();
    let ex = camera_exclusion(&ids(set, &q), &cams(&q), &ids(set, &g), &cams(&g));
    let i2i = chance_rank1(&identity_relevance(&ids(set, &q), &ids(set, &g)), Some(&ex));

    let t = &data.t2i;
    let tg = t.indices_in(Split::Gallery);
    let q_ids: Vec<u64> = t
        .indices_in(Split::Query)
        .into_iter()
        .chain(tg.iter().copied())
        .flat_map(|i| std::iter::repeat(t.images[i].raw_identity).take(t.images[i].captions.len()))
        .collect();
    let t2i = chance_rank1(&identity_relevance(&q_ids, &ids(t, &tg)), None);
    (i2i, t2i)
}
