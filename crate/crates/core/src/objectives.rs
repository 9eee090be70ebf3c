//! Training losses.
//!
//! Conventions shared by every function here:
//! - image-derived tensors have one row per sample of the full batch `B`;
//! - text-derived tensors have one row per entry of `views.t2i`, in that order;
//! - similarity and L2-distance losses L2-normalize their embedding inputs first;
//! - `temperature` is a scalar tensor dividing cosine logits.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::backbone::l2_normalize;
use crate::error::{Error, Result};
use crate::nn::{log_softmax, softmax, Linear};
use crate::params::{Init, ParamBuilder};

/// Smoothing inside the logarithms of the distribution-matching loss.
pub const SDM_EPS: f64 = 1e-8;
const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the instance-level prompt alignment loss.
    pub lambda1: f64,
    /// Weight of the cross-modal prompt regularizer.
    pub lambda2: f64,
    pub temperature: f64,
    pub learnable_temperature: bool,
    pub triplet_margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.4,
            lambda2: 0.06,
            temperature: 0.07,
            learnable_temperature: true,
            triplet_margin: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.triplet_margin < 0.0 {
            return Err(Error::Config("triplet margin must be non-negative".into()));
        }
        Ok(())
    }
}

/// Index views over one joint batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchViews {
    /// Unified identity label of every sample in `B`.
    pub labels: Vec<usize>,
    pub cameras: Vec<usize>,
    /// Samples with a paired caption (`B_t2i`), increasing.
    pub t2i: Vec<usize>,
    /// Samples of the PK-structured image-only sub-batch, increasing.
    pub i2i: Vec<usize>,
}

impl BatchViews {
    pub fn new(
        labels: Vec<usize>,
        cameras: Vec<usize>,
        t2i: Vec<usize>,
        i2i: Vec<usize>,
    ) -> Result<Self> {
        let n = labels.len();
        if cameras.len() != n {
            return Err(Error::Input(
                "camera list length differs from labels".into(),
            ));
        }
        for (name, view) in [("t2i", &t2i), ("i2i", &i2i)] {
            if view.windows(2).any(|w| w[0] >= w[1]) || view.iter().any(|&i| i >= n) {
                return Err(Error::Input(format!(
                    "{name} view must be increasing indices below {n}"
                )));
            }
        }
        Ok(Self {
            labels,
            cameras,
            t2i,
            i2i,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn t2i_labels(&self) -> Vec<usize> {
        self.t2i.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn i2i_labels(&self) -> Vec<usize> {
        self.i2i.iter().map(|&i| self.labels[i]).collect()
    }

    /// The views of the T2I sub-batch taken as a batch of its own.
    pub fn restricted_to_t2i(&self) -> Self {
        let labels = self.t2i_labels();
        let cameras = self.t2i.iter().map(|&i| self.cameras[i]).collect();
        let t2i = (0..labels.len()).collect();
        Self {
            labels,
            cameras,
            t2i,
            i2i: Vec::new(),
        }
    }
}

pub(crate) fn select_rows(x: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let idx: Vec<u32> = rows.iter().map(|&r| r as u32).collect();
    let idx = Tensor::from_vec(idx, rows.len(), x.device())?;
    Ok(x.contiguous()?.index_select(&idx, 0)?)
}

fn check_rows(x: &Tensor, expected: usize, what: &str) -> Result<()> {
    let rows = x.dim(0)?;
    if rows != expected {
        return Err(Error::Config(format!(
            "{what} has {rows} rows, expected {expected}"
        )));
    }
    Ok(())
}

fn mean_squared_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.sum(D::Minus1)?.mean_all()?)
}

fn zero_like_scalar(x: &Tensor) -> Result<Tensor> {
    Ok(Tensor::zeros((), x.dtype(), x.device())?)
}

/// Temperature-scaled cosine logits `[n, m]` between two embedding batches.
pub fn cosine_logits(a: &Tensor, b: &Tensor, temperature: &Tensor) -> Result<Tensor> {
    let sim = l2_normalize(a)?.matmul(&l2_normalize(b)?.t()?)?;
    Ok(sim.broadcast_div(temperature)?)
}

fn match_matrix(labels: &[usize], reference: &Tensor) -> Result<Tensor> {
    let n = labels.len();
    let data: Vec<f64> = labels
        .iter()
        .flat_map(|a| labels.iter().map(move |b| if a == b { 1.0 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(data, (n, n), reference.device())?.to_dtype(reference.dtype())?)
}

/// Distribution matching on precomputed image-to-text logits (`logits[i][j]` scores image `i`
/// against caption `j`), averaged over both retrieval directions.
pub fn sdm_from_logits(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let n = labels.len();
    if n < 2 {
        return Err(Error::Input(format!(
            "distribution matching needs ≥2 pairs, got {n}"
        )));
    }
    let (r, c) = logits.dims2()?;
    if (r, c) != (n, n) {
        return Err(Error::Config(format!(
            "logits are {r}x{c}, expected {n}x{n}"
        )));
    }
    let m = match_matrix(labels, logits)?;
    let q = m.broadcast_div(&m.sum_keepdim(1)?)?;
    let log_q = (q + SDM_EPS)?.log()?;
    let direction = |scores: &Tensor| -> Result<Tensor> {
        let p = softmax(scores)?;
        let log_p = (&p + SDM_EPS)?.log()?;
        Ok((p * (log_p - &log_q)?)?.sum(1)?.mean_all()?)
    };
    let i2t = direction(logits)?;
    let t2i = direction(&logits.t()?.contiguous()?)?;
    Ok(((i2t + t2i)? * 0.5)?)
}

/// Similarity distribution matching between T2I image class embeddings and caption embeddings.
pub fn sdm_loss(
    img: &Tensor,
    txt: &Tensor,
    views: &BatchViews,
    temperature: &Tensor,
) -> Result<Tensor> {
    check_rows(img, views.len(), "image embeddings")?;
    check_rows(txt, views.t2i.len(), "text embeddings")?;
    if views.t2i.len() < 2 {
        return Err(Error::Input(format!(
            "distribution matching needs ≥2 pairs, got {}",
            views.t2i.len()
        )));
    }
    let img_t = select_rows(img, &views.t2i)?;
    sdm_from_logits(
        &cosine_logits(&img_t, txt, temperature)?,
        &views.t2i_labels(),
    )
}

/// Mean softmax cross-entropy of `logits` `[n, C]` against `labels`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, classes) = logits.dims2()?;
    if n != labels.len() || n == 0 {
        return Err(Error::Input(format!(
            "{n} logit rows for {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Label {
            label: bad,
            num_classes: classes,
        });
    }
    let idx: Vec<u32> = labels.iter().map(|&y| y as u32).collect();
    let idx = Tensor::from_vec(idx, (n, 1), logits.device())?;
    let picked = log_softmax(logits)?.gather(&idx, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Batch-normalization neck without bias, always using batch statistics.
#[derive(Clone, Debug)]
pub struct BnNeck {
    weight: Tensor,
}

impl BnNeck {
    pub fn new(b: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: b.get_no_decay("weight", dim, Init::Const(1.0))?,
        })
    }

    pub fn from_weight(weight: Tensor) -> Self {
        Self { weight }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.dim(0)?;
        if n < 2 {
            return Err(Error::Input("batch-norm neck needs ≥2 samples".into()));
        }
        let mean = x.mean_keepdim(0)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(0)?;
        Ok(centered
            .broadcast_div(&(var + BN_EPS)?.sqrt()?)?
            .broadcast_mul(&self.weight)?)
    }
}

/// Identity classifiers of both task branches.
#[derive(Clone, Debug)]
pub struct IdentityHeads {
    pub t2i_classifier: Linear,
    pub i2i_neck: BnNeck,
    pub i2i_classifier: Linear,
}

impl IdentityHeads {
    pub fn new(b: &ParamBuilder, joint_dim: usize, num_identities: usize) -> Result<Self> {
        Ok(Self {
            t2i_classifier: Linear::new(&b.pp("t2i_classifier"), joint_dim, num_identities, false)?,
            i2i_neck: BnNeck::new(&b.pp("i2i_neck"), joint_dim)?,
            i2i_classifier: Linear::new(&b.pp("i2i_classifier"), joint_dim, num_identities, false)?,
        })
    }
}

/// Identity classification for the T2I branch: one classifier shared by the image class
/// embeddings of `B_t2i` and their paired caption embeddings, averaged over both modalities.
pub fn id_loss_t2i(
    img: &Tensor,
    txt: &Tensor,
    views: &BatchViews,
    classifier: &Linear,
) -> Result<Tensor> {
    check_rows(img, views.len(), "image embeddings")?;
    check_rows(txt, views.t2i.len(), "text embeddings")?;
    if views.t2i.is_empty() {
        return zero_like_scalar(img);
    }
    let labels = views.t2i_labels();
    let img_t = select_rows(img, &views.t2i)?;
    let li = cross_entropy(&classifier.forward(&img_t)?, &labels)?;
    let lt = cross_entropy(&classifier.forward(txt)?, &labels)?;
    Ok(((li + lt)? * 0.5)?)
}

/// Identity classification for the I2I branch over the whole batch, after the neck.
pub fn id_loss_i2i(
    feats: &Tensor,
    labels: &[usize],
    neck: &BnNeck,
    classifier: &Linear,
) -> Result<Tensor> {
    check_rows(feats, labels.len(), "image embeddings")?;
    cross_entropy(&classifier.forward(&neck.forward(feats)?)?, labels)
}

fn check_pk(labels: &[usize]) -> Result<()> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &y in labels {
        *counts.entry(y).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::Input(format!(
            "triplet mining needs ≥2 identities, got {}",
            counts.len()
        )));
    }
    if let Some((y, c)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::Input(format!(
            "identity {y} has {c} instance(s); triplet mining needs ≥2"
        )));
    }
    Ok(())
}

/// Pairwise Euclidean distances `[n, n]`, with a floor that keeps the sqrt differentiable.
pub fn pairwise_distances(x: &Tensor) -> Result<Tensor> {
    let n = x.dim(0)?;
    let d = x.dim(1)?;
    let a = x.unsqueeze(1)?.broadcast_as((n, n, d))?;
    let b = x.unsqueeze(0)?.broadcast_as((n, n, d))?;
    let sq = (a - b)?.sqr()?.sum(D::Minus1)?;
    Ok(sq.maximum(1e-12)?.sqrt()?)
}

/// Batch-hard triplet loss over the I2I sub-batch on normalized class embeddings.
pub fn triplet_loss(feats: &Tensor, views: &BatchViews, margin: f64) -> Result<Tensor> {
    check_rows(feats, views.len(), "image embeddings")?;
    let labels = views.i2i_labels();
    check_pk(&labels)?;
    let x = l2_normalize(&select_rows(feats, &views.i2i)?)?;
    let n = labels.len();
    let dist = pairwise_distances(&x)?;
    let mut pos = vec![0f64; n * n];
    let mut neg_penalty = vec![0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            if labels[i] == labels[j] && i != j {
                pos[i * n + j] = 1.0;
            }
            if labels[i] == labels[j] {
                // Distances of normalized vectors are ≤ 2, so this excludes non-negatives from the min.
                neg_penalty[i * n + j] = 1e3;
            }
        }
    }
    let as_t = |v: Vec<f64>| -> Result<Tensor> {
        Ok(Tensor::from_vec(v, (n, n), x.device())?.to_dtype(x.dtype())?)
    };
    let hardest_pos = (&dist * as_t(pos)?)?.max(1)?;
    let hardest_neg = (&dist + as_t(neg_penalty)?)?.min(1)?;
    Ok(((hardest_pos - hardest_neg)? + margin)?
        .relu()?
        .mean_all()?)
}

/// Identity-level prompt contrast, returning `(L_t2i, L_i2t)`.
///
/// `refs[i]` is the reference prompt embedding of sample `i`'s identity. The first term
/// normalizes over images for a fixed prompt, the second over prompts for a fixed image.
pub fn prompt_contrastive(
    img: &Tensor,
    refs: &Tensor,
    temperature: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let n = img.dim(0)?;
    check_rows(refs, n, "reference prompts")?;
    // s[a][b] = sim(image a, prompt of sample b)
    let s = cosine_logits(img, refs, temperature)?;
    let diag = |m: &Tensor| -> Result<Tensor> {
        let idx: Vec<u32> = (0..n as u32).collect();
        let idx = Tensor::from_vec(idx, (n, 1), m.device())?;
        Ok(m.gather(&idx, 1)?.mean_all()?.neg()?)
    };
    let t2i = diag(&log_softmax(&s.t()?.contiguous()?)?)?;
    let i2t = diag(&log_softmax(&s)?)?;
    Ok((t2i, i2t))
}

/// Inversion consistency: prompt embeddings built from pseudo-tokens should land on the
/// features they were inverted from. The visual term averages over `B`, the textual one
/// over `B_t2i`.
pub fn inversion_consistency(
    vis_prompt: &Tensor,
    cls_t2i: &Tensor,
    txt_prompt: &Tensor,
    txt_eos: &Tensor,
    views: &BatchViews,
) -> Result<Tensor> {
    check_rows(vis_prompt, views.len(), "visual prompt embeddings")?;
    check_rows(cls_t2i, views.len(), "image embeddings")?;
    check_rows(txt_prompt, views.t2i.len(), "textual prompt embeddings")?;
    check_rows(txt_eos, views.t2i.len(), "text embeddings")?;
    let visual = mean_squared_distance(&l2_normalize(vis_prompt)?, &l2_normalize(cls_t2i)?)?;
    if views.t2i.is_empty() {
        return Ok(visual);
    }
    let textual = mean_squared_distance(&l2_normalize(txt_prompt)?, &l2_normalize(txt_eos)?)?;
    Ok((visual + textual)?)
}

#[derive(Clone, Debug)]
pub struct IlpaOutput {
    pub loss: Tensor,
    /// Text-derived prompt toward the image class embedding.
    pub tgps: Tensor,
    /// Vision-derived prompt toward the caption embedding.
    pub vgps: Tensor,
    /// Set when the batch had no captioned samples; all terms are then zero.
    pub empty: bool,
}

/// Instance-level prompt alignment with crossed targets.
pub fn ilpa_loss(
    txt_prompt: &Tensor,
    cls_t2i: &Tensor,
    vis_prompt: &Tensor,
    txt_eos: &Tensor,
    views: &BatchViews,
) -> Result<IlpaOutput> {
    check_rows(cls_t2i, views.len(), "image embeddings")?;
    check_rows(vis_prompt, views.len(), "visual prompt embeddings")?;
    check_rows(txt_prompt, views.t2i.len(), "textual prompt embeddings")?;
    check_rows(txt_eos, views.t2i.len(), "text embeddings")?;
    if views.t2i.is_empty() {
        let z = zero_like_scalar(cls_t2i)?;
        return Ok(IlpaOutput {
            loss: z.clone(),
            tgps: z.clone(),
            vgps: z,
            empty: true,
        });
    }
    let img = l2_normalize(&select_rows(cls_t2i, &views.t2i)?)?;
    let vp = l2_normalize(&select_rows(vis_prompt, &views.t2i)?)?;
    let tgps = mean_squared_distance(&l2_normalize(txt_prompt)?, &img)?;
    let vgps = mean_squared_distance(&vp, &l2_normalize(txt_eos)?)?;
    Ok(IlpaOutput {
        loss: (&tgps + &vgps)?,
        tgps,
        vgps,
        empty: false,
    })
}

/// Cross-modal identity classification of I2I class embeddings against every identity prompt.
///
/// Mean-reduced over the batch; multiply by `|B|` for the summed form.
pub fn cic_loss(
    cls_i2i: &Tensor,
    bank: &Tensor,
    labels: &[usize],
    num_identities: usize,
    temperature: &Tensor,
) -> Result<Tensor> {
    let rows = bank.dim(0)?;
    if rows != num_identities {
        return Err(Error::Config(format!(
            "identity prompt bank has {rows} rows, expected {num_identities}"
        )));
    }
    check_rows(cls_i2i, labels.len(), "image embeddings")?;
    cross_entropy(&cosine_logits(cls_i2i, bank, temperature)?, labels)
}

/// Squared Frobenius distance between text- and vision-derived pseudo-token matrices,
/// averaged over `B_t2i`. `p_t` is `[|B_t2i|, K, d_t]`, `p_v` is `[|B|, K, d_t]`.
pub fn cmpr_loss(p_t: &Tensor, p_v: &Tensor, views: &BatchViews) -> Result<Tensor> {
    let (nt, kt, dt) = p_t.dims3()?;
    let (nv, kv, dv) = p_v.dims3()?;
    if (kt, dt) != (kv, dv) {
        return Err(Error::Config(format!(
            "pseudo-token shapes differ: [{kt}, {dt}] vs [{kv}, {dv}]"
        )));
    }
    if nt != views.t2i.len() || nv != views.len() {
        return Err(Error::Config(
            "pseudo-token batch sizes do not match the views".into(),
        ));
    }
    if nt == 0 {
        return zero_like_scalar(p_t);
    }
    let pv = select_rows(p_v, &views.t2i)?;
    Ok((p_t - pv)?.sqr()?.sum((1, 2))?.mean_all()?)
}

/// Loss terms of prompt construction.
#[derive(Clone, Debug)]
pub struct Stage1Parts {
    pub t2i: Tensor,
    pub i2t: Tensor,
    pub ic: Tensor,
}

pub fn stage1_objective(parts: &Stage1Parts) -> Result<Tensor> {
    Ok(((&parts.t2i + &parts.i2t)? + &parts.ic)?)
}

/// Loss terms of representation learning; prompt terms are absent when disabled.
#[derive(Clone, Debug)]
pub struct Stage2Parts {
    pub sdm: Tensor,
    pub id_t2i: Tensor,
    pub triplet: Tensor,
    pub id_i2i: Tensor,
    pub cic: Option<Tensor>,
    pub ilpa: Option<Tensor>,
    pub cmpr: Option<Tensor>,
}

impl Stage2Parts {
    pub fn base(&self) -> Result<Tensor> {
        Ok((((&self.sdm + &self.id_t2i)? + &self.triplet)? + &self.id_i2i)?)
    }
}

pub fn stage2_objective(parts: &Stage2Parts, weights: &LossWeights) -> Result<Tensor> {
    let mut total = parts.base()?;
    if let Some(cic) = &parts.cic {
        total = (total + cic)?;
    }
    if let Some(ilpa) = &parts.ilpa {
        total = (total + (ilpa * weights.lambda1)?)?;
    }
    if let Some(cmpr) = &parts.cmpr {
        total = (total + (cmpr * weights.lambda2)?)?;
    }
    Ok(total)
}

/// Reads a scalar tensor as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
