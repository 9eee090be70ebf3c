//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use hpl_reid::nn::Linear;
use hpl_reid::objectives::{
    cic_loss, cmpr_loss, id_loss_i2i, id_loss_t2i, ilpa_loss, inversion_consistency,
    prompt_contrastive, scalar, sdm_loss, stage1_objective, stage2_objective, triplet_loss,
    BatchViews, BnNeck, LossWeights, Stage1Parts, Stage2Parts,
};
use hpl_reid::Result;

pub const D_E: usize = 8;
pub const BATCH: usize = 6;
pub const N_ID: usize = 5;
pub const K_TOKENS: usize = 2;
pub const D_TOKEN: usize = 4;
pub const FD_STEP: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn scalar_tensor(v: f64) -> Tensor {
    Tensor::new(v, &Device::Cpu).unwrap()
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_dtype(DType::F64).unwrap().to_vec2().unwrap()
}

/// B = {0..6}: captioned samples 0, 1, 2 (labels 0, 3, 1); the PK sub-batch is 2..6 (labels 1, 1, 2, 2).
pub fn mixed_views() -> BatchViews {
    BatchViews::new(
        vec![0, 3, 1, 1, 2, 2],
        vec![0, 1, 0, 1, 0, 1],
        vec![0, 1, 2],
        vec![2, 3, 4, 5],
    )
    .unwrap()
}

/// A disjoint split as the joint sampler produces it: T2I rows first, then a PK block.
pub fn disjoint_views() -> BatchViews {
    BatchViews::new(
        vec![0, 3, 1, 1, 2, 2],
        vec![0, 1, 0, 1, 0, 1],
        vec![0, 1],
        vec![2, 3, 4, 5],
    )
    .unwrap()
}

/// Every sample captioned, with repeated identities so the match matrix is not diagonal.
pub fn caption_views() -> BatchViews {
    BatchViews::new(
        vec![0, 0, 1, 2, 3, 3],
        vec![0; 6],
        (0..6).collect(),
        Vec::new(),
    )
    .unwrap()
}

pub type LossFn = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;

/// Largest norm-wise relative error, over the inputs, between autodiff gradients and
/// central differences with step `h`.
pub fn gradient_error(inputs: &[Tensor], f: &LossFn, h: f64) -> Result<f64> {
    let vars: Vec<Var> = inputs
        .iter()
        .map(Var::from_tensor)
        .collect::<candle_core::Result<_>>()?;
    let attached: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let grads = f(&attached)?.backward()?;
    let mut worst = 0f64;
    for (k, var) in vars.iter().enumerate() {
        let shape = inputs[k].shape().clone();
        let base: Vec<f64> = inputs[k].flatten_all()?.to_vec1()?;
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1()?,
            None => vec![0.0; base.len()],
        };
        let eval = |i: usize, delta: f64| -> Result<f64> {
            let mut x = base.clone();
            x[i] += delta;
            let mut args = inputs.to_vec();
            args[k] = Tensor::from_vec(x, shape.clone(), &Device::Cpu)?;
            scalar(&f(&args)?)
        };
        let mut num = 0.0;
        let mut den_a = 0.0;
        let mut den_n = 0.0;
        for i in 0..base.len() {
            let fd = (eval(i, h)? - eval(i, -h)?) / (2.0 * h);
            num += (fd - analytic[i]).powi(2);
            den_a += analytic[i].powi(2);
            den_n += fd.powi(2);
        }
        let scale = den_a.sqrt().max(den_n.sqrt());
        if scale > 1e-12 {
            worst = worst.max(num.sqrt() / scale);
        }
    }
    Ok(worst)
}

fn temperature(rng: &mut ChaCha8Rng) -> Tensor {
    scalar_tensor(rng.random_range(0.5..1.5))
}

/// One random instance per loss operation: inputs plus the loss as a function of them.
pub fn gradient_case(name: &str, seed: u64) -> (Vec<Tensor>, LossFn) {
    let mut r = rng(seed);
    let b = BATCH;
    let nt = mixed_views().t2i.len();
    match name {
        "sdm" => (
            vec![
                randn(&mut r, &[b, D_E]),
                randn(&mut r, &[b, D_E]),
                temperature(&mut r),
            ],
            Box::new(|x| sdm_loss(&x[0], &x[1], &caption_views(), &x[2])),
        ),
        "id_loss" => (
            vec![
                randn(&mut r, &[b, D_E]),
                randn(&mut r, &[nt, D_E]),
                randn(&mut r, &[N_ID, D_E]),
                randn(&mut r, &[b, D_E]),
                (randn(&mut r, &[D_E]) * 0.1)
                    .unwrap()
                    .affine(1.0, 1.0)
                    .unwrap(),
                randn(&mut r, &[N_ID, D_E]),
            ],
            Box::new(|x| {
                let v = mixed_views();
                let t2i = id_loss_t2i(&x[0], &x[1], &v, &Linear::from_weight(x[2].clone(), None))?;
                let neck = BnNeck::from_weight(x[4].clone());
                let i2i = id_loss_i2i(
                    &x[3],
                    &v.labels,
                    &neck,
                    &Linear::from_weight(x[5].clone(), None),
                )?;
                Ok((t2i + i2i)?)
            }),
        ),
        "triplet" => (
            vec![randn(&mut r, &[b, D_E])],
            Box::new(|x| triplet_loss(&x[0], &mixed_views(), 0.3)),
        ),
        "prompt_contrastive" => (
            vec![
                randn(&mut r, &[b, D_E]),
                randn(&mut r, &[b, D_E]),
                temperature(&mut r),
            ],
            Box::new(|x| {
                let (a, c) = prompt_contrastive(&x[0], &x[1], &x[2])?;
                Ok((a + (c * 0.5)?)?)
            }),
        ),
        "inversion_consistency" => (
            vec![
                randn(&mut r, &[b, D_E]),
                randn(&mut r, &[b, D_E]),
                randn(&mut r, &[nt, D_E]),
                randn(&mut r, &[nt, D_E]),
            ],
            Box::new(|x| inversion_consistency(&x[0], &x[1], &x[2], &x[3], &mixed_views())),
        ),
        "ilpa" => (
            vec![
                randn(&mut r, &[nt, D_E]),
                randn(&mut r, &[b, D_E]),
                randn(&mut r, &[b, D_E]),
                randn(&mut r, &[nt, D_E]),
            ],
            Box::new(|x| Ok(ilpa_loss(&x[0], &x[1], &x[2], &x[3], &mixed_views())?.loss)),
        ),
        "cic" => (
            vec![
                randn(&mut r, &[b, D_E]),
                randn(&mut r, &[N_ID, D_E]),
                temperature(&mut r),
            ],
            Box::new(|x| cic_loss(&x[0], &x[1], &mixed_views().labels, N_ID, &x[2])),
        ),
        "cmpr" => (
            vec![
                randn(&mut r, &[nt, K_TOKENS, D_TOKEN]),
                randn(&mut r, &[b, K_TOKENS, D_TOKEN]),
            ],
            Box::new(|x| cmpr_loss(&x[0], &x[1], &mixed_views())),
        ),
        "stage1_objective" => (
            vec![
                randn(&mut r, &[b, D_E]),
                randn(&mut r, &[b, D_E]),
                randn(&mut r, &[b, D_E]),
                randn(&mut r, &[nt, D_E]),
                randn(&mut r, &[nt, D_E]),
                temperature(&mut r),
            ],
            Box::new(|x| {
                let (t2i, i2t) = prompt_contrastive(&x[0], &x[1], &x[5])?;
                let ic = inversion_consistency(&x[2], &x[0], &x[3], &x[4], &mixed_views())?;
                stage1_objective(&Stage1Parts { t2i, i2t, ic })
            }),
        ),
        "stage2_objective" => (
            vec![
                randn(&mut r, &[b, D_E]),                // 0 cls_t2i
                randn(&mut r, &[b, D_E]),                // 1 cls_i2i
                randn(&mut r, &[nt, D_E]),               // 2 caption eos
                randn(&mut r, &[N_ID, D_E]),             // 3 t2i classifier
                randn(&mut r, &[N_ID, D_E]),             // 4 i2i classifier
                randn(&mut r, &[N_ID, D_E]),             // 5 prompt bank
                randn(&mut r, &[nt, D_E]),               // 6 text-derived prompt
                randn(&mut r, &[b, D_E]),                // 7 vision-derived prompt
                randn(&mut r, &[nt, K_TOKENS, D_TOKEN]), // 8 P_t
                randn(&mut r, &[b, K_TOKENS, D_TOKEN]),  // 9 P_v
                temperature(&mut r),                     // 10
            ],
            Box::new(|x| {
                let v = mixed_views();
                let ones = Tensor::ones(D_E, DType::F64, &Device::Cpu)?;
                let parts = Stage2Parts {
                    sdm: sdm_loss(&x[0], &x[2], &v, &x[10])?,
                    id_t2i: id_loss_t2i(
                        &x[0],
                        &x[2],
                        &v,
                        &Linear::from_weight(x[3].clone(), None),
                    )?,
                    triplet: triplet_loss(&x[1], &v, 0.3)?,
                    id_i2i: id_loss_i2i(
                        &x[1],
                        &v.labels,
                        &BnNeck::from_weight(ones),
                        &Linear::from_weight(x[4].clone(), None),
                    )?,
                    cic: Some(cic_loss(&x[1], &x[5], &v.labels, N_ID, &x[10])?),
                    ilpa: Some(ilpa_loss(&x[6], &x[0], &x[7], &x[2], &v)?.loss),
                    cmpr: Some(cmpr_loss(&x[8], &x[9], &v)?),
                };
                stage2_objective(&parts, &LossWeights::default())
            }),
        ),
        other => panic!("unknown loss {other}"),
    }
}

pub const LOSS_OPS: [&str; 10] = [
    "sdm",
    "id_loss",
    "triplet",
    "prompt_contrastive",
    "inversion_consistency",
    "ilpa",
    "cic",
    "cmpr",
    "stage1_objective",
    "stage2_objective",
];

/// Worst relative gradient error per loss operation over `instances` random cases.
pub fn gradient_suite(instances: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    for (i, name) in LOSS_OPS.iter().enumerate() {
        let mut worst = 0f64;
        for s in 0..instances {
            let (inputs, f) = gradient_case(name, 1000 * i as u64 + s);
            worst = worst.max(gradient_error(&inputs, &f, FD_STEP)?);
        }
        out.push((*name, worst));
    }
    Ok(out)
}

/// Brute-force retrieval metrics written independently of the library: for each query,
/// count better-scored gallery items directly, with ties resolved by gallery index.
pub struct OracleMetrics {
    pub cmc: [f64; 3],
    pub map: f64,
    pub evaluated: usize,
}

pub fn oracle_metrics(
    scores: &[Vec<f64>],
    relevant: &[Vec<bool>],
    excluded: Option<&[Vec<bool>]>,
) -> Option<OracleMetrics> {
    let mut hits = [0usize; 3];
    let mut ap_sum = 0.0;
    let mut evaluated = 0;
    for q in 0..scores.len() {
        let keep: Vec<usize> = (0..scores[q].len())
            .filter(|&g| !excluded.map(|e| e[q][g]).unwrap_or(false))
            .collect();
        let positives: Vec<usize> = keep.iter().copied().filter(|&g| relevant[q][g]).collect();
        if positives.is_empty() {
            continue;
        }
        evaluated += 1;
        // 1-based position of gallery item g among kept items.
        let position = |g: usize| {
            1 + keep
                .iter()
                .filter(|&&o| {
                    scores[q][o] > scores[q][g] || (scores[q][o] == scores[q][g] && o < g)
                })
                .count()
        };
        let mut pos_ranks: Vec<usize> = positives.iter().map(|&g| position(g)).collect();
        pos_ranks.sort_unstable();
        for (slot, k) in [1usize, 5, 10].iter().enumerate() {
            if pos_ranks[0] <= *k {
                hits[slot] += 1;
            }
        }
        let ap: f64 = pos_ranks
            .iter()
            .enumerate()
            .map(|(i, &r)| (i + 1) as f64 / r as f64)
            .sum::<f64>()
            / pos_ranks.len() as f64;
        ap_sum += ap;
    }
    if evaluated == 0 {
        return None;
    }
    let n = evaluated as f64;
    Some(OracleMetrics {
        cmc: [hits[0] as f64 / n, hits[1] as f64 / n, hits[2] as f64 / n],
        map: ap_sum / n,
        evaluated,
    })
}

/// Random retrieval instance: ≤`max_q` queries over ≤`max_g` gallery items with
/// identities from a small pool, optionally with cameras. Scores come from a coarse
/// grid so ties occur.
pub struct RetrievalCase {
    pub scores: Vec<Vec<f64>>,
    pub q_ids: Vec<u64>,
    pub g_ids: Vec<u64>,
    pub q_cams: Vec<usize>,
    pub g_cams: Vec<usize>,
}

pub fn retrieval_case(r: &mut ChaCha8Rng, max_q: usize, max_g: usize) -> RetrievalCase {
    let nq = r.random_range(1..=max_q);
    let ng = r.random_range(1..=max_g);
    let pool = r.random_range(1..=5u64);
    let scores = (0..nq)
        .map(|_| {
            (0..ng)
                .map(|_| (r.random_range(0..40) as f64) / 20.0 - 1.0)
                .collect()
        })
        .collect();
    RetrievalCase {
        scores,
        q_ids: (0..nq).map(|_| r.random_range(0..pool)).collect(),
        g_ids: (0..ng).map(|_| r.random_range(0..pool)).collect(),
        q_cams: (0..nq).map(|_| r.random_range(0..3)).collect(),
        g_cams: (0..ng).map(|_| r.random_range(0..3)).collect(),
    }
}

/// Desk preset shrunk to the 8-identity synthetic set: 1 Stage I epoch, 2 Stage II
/// epochs, two steps per epoch. Data is generated under `dir/data`.
pub fn tiny_setup(
    dir: &std::path::Path,
) -> (hpl_reid::config::RunConfig, hpl_reid::data::TrainingData) {
    let mut cfg = hpl_reid::config::RunConfig::desk();
    cfg.data.synthetic.n_identities = 8;
    cfg.data.synthetic.images_per_identity = 8;
    cfg.data.root = dir.join("data");
    cfg.stage1.epochs = 1;
    cfg.stage2.epochs = 2;
    cfg.stage2.warmup_epochs = 1;
    cfg.stage2.prompt_audit_every = 1;
    cfg.output.dir = dir.join("run");
    cfg.validate().unwrap();
    hpl_reid::commands::generate(&cfg, &cfg.data.root, None, None).unwrap();
    let data = hpl_reid::commands::load_data(&cfg).unwrap();
    (cfg, data)
}

/// Deep copies of every parameter, keyed by name.
pub fn snapshot(params: &hpl_reid::params::Params) -> std::collections::BTreeMap<String, Vec<f32>> {
    params
        .all_vars()
        .into_iter()
        .map(|(n, v)| {
            (
                n,
                v.as_tensor()
                    .flatten_all()
                    .unwrap()
                    .to_vec1::<f32>()
                    .unwrap(),
            )
        })
        .collect()
}

fn t2(v: &[Vec<f64>]) -> Tensor {
    let (r, c) = (v.len(), v[0].len());
    Tensor::from_vec(v.concat(), (r, c), &Device::Cpu).unwrap()
}

fn s(t: &Tensor) -> f64 {
    scalar(t).unwrap()
}

/// One closed-form case: (name, computed, expected, tolerance).
pub type AnalyticCase = (&'static str, f64, f64, f64);

/// Uniform-logit, perfect-alignment and equidistant cases with known values.
pub fn analytic_cases() -> Vec<AnalyticCase> {
    use hpl_reid::objectives::sdm_from_logits;
    let mut out = Vec::new();
    let tau = scalar_tensor(0.07);

    let six = vec![vec![1.0, 2.0, 3.0, 4.0]; BATCH];
    let (a, b) = prompt_contrastive(&t2(&six), &t2(&six), &tau).unwrap();
    let ln_b = (BATCH as f64).ln();
    out.push(("prompt_contrastive i2t = ln|B|", s(&a), ln_b, 1e-6));
    out.push(("prompt_contrastive t2i = ln|B|", s(&b), ln_b, 1e-6));

    // Zero classifier: uniform over 8 identities for both heads.
    let views = BatchViews::new(
        vec![0, 7, 3, 3, 5, 5],
        vec![0; 6],
        vec![0, 1],
        vec![2, 3, 4, 5],
    )
    .unwrap();
    let zeros = Linear::from_weight(
        Tensor::zeros((8, 4), DType::F64, &Device::Cpu).unwrap(),
        None,
    );
    let mut r = rng(1);
    let img = randn(&mut r, &[6, 4]);
    let txt = randn(&mut r, &[2, 4]);
    let ln8 = 8f64.ln();
    out.push((
        "id_loss t2i = ln N_id",
        s(&id_loss_t2i(&img, &txt, &views, &zeros).unwrap()),
        ln8,
        1e-6,
    ));
    let neck = BnNeck::from_weight(Tensor::ones(4, DType::F64, &Device::Cpu).unwrap());
    out.push((
        "id_loss i2i = ln N_id",
        s(&id_loss_i2i(&img, &views.labels, &neck, &zeros).unwrap()),
        ln8,
        1e-6,
    ));

    // Identical prompt embeddings: uniform over 10 identities.
    let bank = t2(&vec![vec![0.2, 0.9, -0.4, 1.0]; 10]);
    let cic = cic_loss(&img, &bank, &[0, 9, 4, 4, 2, 2], 10, &tau).unwrap();
    out.push(("cic_loss = ln N_id", s(&cic), 10f64.ln(), 1e-6));

    // Logits reproducing the label-match distribution exactly.
    let labels = [0usize, 0, 1, 2, 2, 2];
    let logits: Vec<Vec<f64>> = labels
        .iter()
        .map(|a| {
            labels
                .iter()
                .map(|b| if a == b { 0.0 } else { -1e4 })
                .collect()
        })
        .collect();
    out.push((
        "sdm aligned = 0",
        s(&sdm_from_logits(&t2(&logits), &labels).unwrap()),
        0.0,
        1e-9,
    ));

    let v = mixed_views();
    let mut r = rng(2);
    let cls = randn(&mut r, &[BATCH, D_E]);
    let eos = randn(&mut r, &[3, D_E]);
    let cls_t = cls.narrow(0, 0, 3).unwrap();
    let ic = inversion_consistency(
        &(&cls * 2.0).unwrap(),
        &cls,
        &(&eos * 0.5).unwrap(),
        &eos,
        &v,
    )
    .unwrap();
    out.push(("ic aligned = 0", s(&ic), 0.0, 1e-9));

    // Vision prompt rows of the captioned samples equal their captions.
    let mut vp_rows = rows(&randn(&mut r, &[BATCH, D_E]));
    for (k, &i) in v.t2i.iter().enumerate() {
        vp_rows[i] = rows(&eos)[k].clone();
    }
    let ilpa = ilpa_loss(&cls_t, &cls, &t2(&vp_rows), &eos, &v).unwrap();
    out.push(("ilpa aligned = 0", s(&ilpa.loss), 0.0, 1e-9));

    let pv = randn(&mut r, &[BATCH, K_TOKENS, D_TOKEN]);
    let pt = pv.narrow(0, 0, 3).unwrap();
    out.push((
        "cmpr aligned = 0",
        s(&cmpr_loss(&pt, &pv, &v).unwrap()),
        0.0,
        1e-9,
    ));

    // Orthonormal rows: every pair is equally far apart.
    let mut e = vec![vec![0.0; D_E]; 6];
    for (i, row) in e.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    out.push((
        "triplet equidistant = margin",
        s(&triplet_loss(&t2(&e), &mixed_views(), 0.3).unwrap()),
        0.3,
        1e-6,
    ));
    out
}

/// Library metrics against the brute-force oracle; `None` when every query lacks positives.
pub fn compare_with_oracle(
    scores: &[Vec<f64>],
    relevant: &[Vec<bool>],
    excluded: Option<&[Vec<bool>]>,
) -> Option<f64> {
    let oracle = oracle_metrics(scores, relevant, excluded);
    let lib = hpl_reid::evaluator::retrieval_metrics("x", scores, relevant, excluded);
    match (oracle, lib) {
        (None, Err(e)) => {
            assert_eq!(e.kind(), "evaluation");
            None
        }
        (Some(o), Ok(r)) => {
            assert_eq!(o.evaluated, r.n_queries);
            let diffs = [
                (o.cmc[0] - r.rank1).abs(),
                (o.cmc[1] - r.rank5).abs(),
                (o.cmc[2] - r.rank10).abs(),
                (o.map - r.map).abs(),
            ];
            Some(diffs.into_iter().fold(0.0, f64::max))
        }
        (o, r) => panic!(
            "oracle {:?} vs library {:?}",
            o.map(|m| m.map),
            r.map(|m| m.map)
        ),
    }
}

pub fn case_exclusion(c: &RetrievalCase) -> Vec<Vec<bool>> {
    hpl_reid::evaluator::camera_exclusion(&c.q_ids, &c.q_cams, &c.g_ids, &c.g_cams)
}

/// Runs `cases` random instances, half with camera filtering; returns (cases with positives, worst deviation).
pub fn oracle_agreement(cases: usize) -> (usize, f64) {
    let mut r = rng(42);
    let mut worst = 0f64;
    let mut scored = 0;
    for i in 0..cases {
        let c = retrieval_case(&mut r, 5, 20);
        let rel = hpl_reid::evaluator::identity_relevance(&c.q_ids, &c.g_ids);
        let ex = case_exclusion(&c);
        let excluded = if i % 2 == 0 {
            Some(ex.as_slice())
        } else {
            None
        };
        if let Some(d) = compare_with_oracle(&c.scores, &rel, excluded) {
            worst = worst.max(d);
            scored += 1;
        }
    }
    (scored, worst)
}

/// Counts (cases checked, cases where a strictly increasing score transform changed any metric).
pub fn monotone_invariance(cases: usize) -> (usize, usize) {
    use hpl_reid::evaluator::{identity_relevance, retrieval_metrics};
    let mut r = rng(7);
    let (mut checked, mut broken) = (0, 0);
    let transforms: [fn(f64) -> f64; 3] = [
        |s| (3.0 * s).exp(),
        |s| s * s * s + 2.0 * s,
        |s| 1.0 / (1.0 + (-s).exp()),
    ];
    while checked < cases {
        let c = retrieval_case(&mut r, 5, 20);
        let rel = identity_relevance(&c.q_ids, &c.g_ids);
        let ex = case_exclusion(&c);
        let Ok(base) = retrieval_metrics("x", &c.scores, &rel, Some(&ex)) else {
            continue;
        };
        checked += 1;
        for f in transforms {
            let t: Vec<Vec<f64>> = c
                .scores
                .iter()
                .map(|row| row.iter().map(|&s| f(s)).collect())
                .collect();
            let m = retrieval_metrics("x", &t, &rel, Some(&ex)).unwrap();
            if (m.rank1, m.rank5, m.rank10) != (base.rank1, base.rank5, base.rank10)
                || (m.map - base.map).abs() >= 1e-12
            {
                broken += 1;
                break;
            }
        }
    }
    (checked, broken)
}

/// Replaces the rows `which` of `x` with fresh random values.
pub fn perturb(x: &Tensor, which: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let noise = randn(&mut r, x.dims()).to_dtype(x.dtype()).unwrap();
    let mask: Vec<f64> = (0..x.dim(0).unwrap())
        .map(|i| if which.contains(&i) { 1.0 } else { 0.0 })
        .collect();
    let mut shape = vec![1; x.rank()];
    shape[0] = mask.len();
    let mask = Tensor::from_vec(mask, shape, x.device())
        .unwrap()
        .to_dtype(x.dtype())
        .unwrap();
    (x + noise.broadcast_mul(&mask).unwrap()).unwrap()
}

/// Perturbs the image-only rows of random inputs and returns, per captioned loss, the
/// largest absolute change seen over `cases` draws.
pub fn subset_deltas(cases: u64) -> Vec<(&'static str, f64)> {
    let v = disjoint_views();
    let only_i2i = v.i2i.clone();
    let tau = scalar_tensor(0.07);
    let mut worst = [
        ("sdm", 0f64),
        ("ilpa", 0.0),
        ("cmpr", 0.0),
        ("ic (caption term)", 0.0),
    ];
    for seed in 0..cases {
        let mut r = rng(seed);
        let cls = randn(&mut r, &[BATCH, D_E]);
        let eos = randn(&mut r, &[2, D_E]);
        let vp = randn(&mut r, &[BATCH, D_E]);
        let tp = randn(&mut r, &[2, D_E]);
        let pt = randn(&mut r, &[2, K_TOKENS, D_TOKEN]);
        let pv = randn(&mut r, &[BATCH, K_TOKENS, D_TOKEN]);
        let (cls2, vp2, pv2) = (
            perturb(&cls, &only_i2i, 99 + seed),
            perturb(&vp, &only_i2i, 199 + seed),
            perturb(&pv, &only_i2i, 299 + seed),
        );
        let pairs = [
            (
                sdm_loss(&cls, &eos, &v, &tau).unwrap(),
                sdm_loss(&cls2, &eos, &v, &tau).unwrap(),
            ),
            (
                ilpa_loss(&tp, &cls, &vp, &eos, &v).unwrap().loss,
                ilpa_loss(&tp, &cls2, &vp2, &eos, &v).unwrap().loss,
            ),
            (
                cmpr_loss(&pt, &pv, &v).unwrap(),
                cmpr_loss(&pt, &pv2, &v).unwrap(),
            ),
            // The first consistency term is made exactly zero to isolate the caption term.
            (
                inversion_consistency(&cls, &cls, &tp, &eos, &v).unwrap(),
                inversion_consistency(&cls2, &cls2, &tp, &eos, &v).unwrap(),
            ),
        ];
        for (w, (a, b)) in worst.iter_mut().zip(pairs) {
            w.1 = w.1.max((s(&a) - s(&b)).abs());
        }
    }
    worst.to_vec()
}

/// Gradient mass that each task loss sends to its own and to the other task's class embedding.
pub struct RoutingGradient {
    pub loss: &'static str,
    pub own: f64,
    pub other: f64,
}

/// Stage II losses on one sampled batch, differentiated with respect to leaf copies of
/// the two routed class embeddings.
pub fn routing_gradients(
    session: &hpl_reid::train::Session,
    cfg: &hpl_reid::config::RunConfig,
    data: &hpl_reid::data::TrainingData,
) -> Vec<RoutingGradient> {
    use hpl_reid::backbone::VisualFeatures;
    use hpl_reid::data::JointSampler;
    use hpl_reid::model::PromptTerms;

    let model = session.model();
    let mut sampler = JointSampler::new(cfg.data.sampler.clone(), data, 5).unwrap();
    let batch = sampler.next_batch(data, &Device::Cpu).unwrap();
    let enc = model.vision.encode_image(&batch.images).unwrap();
    let cls_t2i = Var::from_tensor(&enc.cls_t2i.detach()).unwrap();
    let cls_i2i = Var::from_tensor(&enc.cls_i2i.detach()).unwrap();
    let vis = VisualFeatures {
        cls_t2i: cls_t2i.as_tensor().clone(),
        cls_i2i: cls_i2i.as_tensor().clone(),
        ..enc
    };
    let txt = model.text.encode_text(&batch.captions).unwrap();
    let terms = PromptTerms {
        hpl: true,
        cmpr: true,
    };
    let parts = model
        .stage2_losses_from_features(
            &vis,
            &txt,
            &batch.views,
            session.bank_embeddings(),
            terms,
            &cfg.loss,
        )
        .unwrap();

    let grad_abs = |loss: &Tensor, wrt: &Tensor| -> f64 {
        match loss.backward().unwrap().get(wrt) {
            Some(g) => s(&g.abs().unwrap().sum_all().unwrap()),
            None => 0.0,
        }
    };
    let (t, i) = (&vis.cls_t2i, &vis.cls_i2i);
    let mut out = Vec::new();
    for (loss, l) in [("sdm", &parts.sdm), ("id_t2i", &parts.id_t2i)] {
        out.push(RoutingGradient {
            loss,
            own: grad_abs(l, t),
            other: grad_abs(l, i),
        });
    }
    let cic = parts.cic.as_ref().unwrap();
    for (loss, l) in [
        ("triplet", &parts.triplet),
        ("id_i2i", &parts.id_i2i),
        ("cic", cic),
    ] {
        out.push(RoutingGradient {
            loss,
            own: grad_abs(l, i),
            other: grad_abs(l, t),
        });
    }
    out
}
