//! Evaluates every training objective on a small random batch.
//!
//! cargo run --example losses_demo

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use hpl_reid::objectives::*;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> hpl_reid::Result<Tensor> {
    let v: Vec<f64> = (0..shape.iter().product::<usize>())
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

fn main() -> hpl_reid::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (d, n_id) = (8, 5);
    // Six samples: the first two carry captions, the last four form a 2x2 PK block.
    let views = BatchViews::new(
        vec![0, 3, 1, 1, 2, 2],
        vec![0, 1, 0, 1, 0, 1],
        vec![0, 1],
        vec![2, 3, 4, 5],
    )?;
    let tau = Tensor::new(0.07f64, &Device::Cpu)?;

    let cls = randn(&mut rng, &[6, d])?;
    let eos = randn(&mut rng, &[2, d])?;
    let t_prompt = randn(&mut rng, &[2, d])?;
    let v_prompt = randn(&mut rng, &[6, d])?;
    let bank = randn(&mut rng, &[n_id, d])?;
    let p_text = randn(&mut rng, &[2, 4, 16])?;
    let p_vis = randn(&mut rng, &[6, 4, 16])?;
    let classifier = hpl_reid::nn::Linear::from_weight(randn(&mut rng, &[n_id, d])?, None);
    let neck = BnNeck::from_weight(Tensor::ones(d, DType::F64, &Device::Cpu)?);

    // Each sample's identity prompt embedding, looked up from the bank.
    let own_prompts = bank.index_select(&Tensor::new(&[0u32, 3, 1, 1, 2, 2], &Device::Cpu)?, 0)?;
    let (i2t, t2i) = prompt_contrastive(&cls, &own_prompts, &tau)?;
    let ilpa = ilpa_loss(&t_prompt, &cls, &v_prompt, &eos, &views)?;
    let rows = [
        ("sdm", sdm_loss(&cls, &eos, &views, &tau)?),
        ("id (t2i)", id_loss_t2i(&cls, &eos, &views, &classifier)?),
        (
            "id (i2i)",
            id_loss_i2i(&cls, &views.labels, &neck, &classifier)?,
        ),
        ("triplet", triplet_loss(&cls, &views, 0.3)?),
        ("prompt contrastive i2t", i2t),
        ("prompt contrastive t2i", t2i),
        (
            "inversion consistency",
            inversion_consistency(&v_prompt, &cls, &t_prompt, &eos, &views)?,
        ),
        ("ilpa", ilpa.loss),
        ("cic", cic_loss(&cls, &bank, &views.labels, n_id, &tau)?),
        ("cmpr", cmpr_loss(&p_text, &p_vis, &views)?),
    ];
    for (name, value) in rows {
        println!("{name:<24} {:>10.5}", scalar(&value)?);
    }
    println!(
        "ln |B| = {:.5}, ln N_id = {:.5}",
        6f64.ln(),
        (n_id as f64).ln()
    );
    Ok(())
}
