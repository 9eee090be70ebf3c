//! Interrupts Stage I after a few steps, saves, reloads and checks that the
//! resumed session reproduces the uninterrupted loss trace.
//!
//! cargo run --example checkpoint_resume -- [out_dir]

use std::path::PathBuf;

use hpl_reid::config::RunConfig;
use hpl_reid::data::{generate_synthetic, TrainingData};
use hpl_reid::train::{load_checkpoint, Session};

fn main() -> hpl_reid::Result<()> {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "runs/checkpoint_resume".into()),
    );
    let mut cfg = RunConfig::desk();
    cfg.data.synthetic.n_identities = 8;
    let g = generate_synthetic(&cfg.synthetic_spec(), &out.join("data"))?;
    let data = TrainingData::from_paths(
        &g.t2i_path,
        &g.i2i_path,
        &cfg.data.correspondences,
        cfg.model.max_text_len,
    )?;

    let mut a = Session::stage1(&cfg, &data)?;
    for _ in 0..4 {
        a.step()?;
    }
    let ckpt_dir = out.join("interrupted");
    a.save(&ckpt_dir)?;
    let straight: Vec<f64> = (0..10)
        .map(|_| a.step().map(|r| r.total()))
        .collect::<hpl_reid::Result<_>>()?;

    // The config hash is checked on load; a different config would be refused.
    let ckpt = load_checkpoint(&ckpt_dir, Some(&cfg), false)?;
    println!(
        "checkpoint: stage {} step {} hash {}",
        ckpt.meta.stage,
        ckpt.meta.step,
        &ckpt.meta.config_hash[..12]
    );
    let mut b = Session::resume(&cfg, &data, &ckpt)?;
    let mut worst = 0f64;
    for (i, want) in straight.iter().enumerate() {
        let got = b.step()?.total();
        worst = worst.max((got - want).abs());
        println!(
            "step {:>2}: uninterrupted {want:.6} resumed {got:.6}",
            ckpt.meta.step as usize + i
        );
    }
    println!("largest difference {worst:.1e}");
    Ok(())
}
