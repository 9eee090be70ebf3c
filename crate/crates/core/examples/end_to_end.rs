//! Generate the synthetic pair, train both stages with the desk preset and evaluate.
//!
//! cargo run --release --example end_to_end -- [out_dir] [seed]

use std::path::PathBuf;
use std::time::Instant;

use hpl_reid::config::RunConfig;
use hpl_reid::data::{generate_synthetic, TrainingData};
use hpl_reid::evaluator::{chance_levels, evaluate_i2i, evaluate_t2i};
use hpl_reid::train::{model_from_checkpoint, run_stage1, run_stage2};

fn main() -> hpl_reid::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/end_to_end".into()));
    let mut cfg = RunConfig::desk();
    if let Some(seed) = args.next() {
        cfg.seed = seed.parse().expect("seed must be an integer");
    }

    let t = Instant::now();
    let generated = generate_synthetic(&cfg.synthetic_spec(), &out.join("data"))?;
    let data = TrainingData::from_paths(
        &generated.t2i_path,
        &generated.i2i_path,
        &cfg.data.correspondences,
        cfg.model.max_text_len,
    )?;
    println!(
        "{} identities, vocabulary of {}",
        data.num_identities(),
        data.vocab.len()
    );

    let s1 = run_stage1(&cfg, &data, &out)?;
    for m in &s1.meta.history {
        println!(
            "stage 1 epoch {} {:?} ({:.1}s)",
            m.epoch, m.losses, m.wall_time_s
        );
    }
    let s2 = run_stage2(&cfg, &data, &out, false)?;
    for m in &s2.meta.history {
        println!(
            "stage 2 epoch {} {:?} ({:.1}s)",
            m.epoch, m.losses, m.wall_time_s
        );
    }

    let model = model_from_checkpoint(&s2, &data.vocab)?;
    let (chance_i2i, chance_t2i) = chance_levels(&data);
    let t2i = evaluate_t2i(&model, &data, cfg.eval.batch_size)?;
    let i2i = evaluate_i2i(&model, &data, cfg.eval.batch_size)?;
    println!(
        "t2i rank1 {:.3} mAP {:.3} (chance {:.3})",
        t2i.rank1, t2i.map, chance_t2i
    );
    println!(
        "i2i rank1 {:.3} mAP {:.3} (chance {:.3})",
        i2i.rank1, i2i.map, chance_i2i
    );
    println!("total {:.1}s", t.elapsed().as_secs_f64());
    Ok(())
}
