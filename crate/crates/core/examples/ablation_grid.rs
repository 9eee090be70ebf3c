//! Trains and evaluates the four component rows (baseline, +TRT, +HPL, +CMPR)
//! on a reduced schedule and prints the comparison table.
//!
//! cargo run --release --example ablation_grid -- [out_dir] [seed]

use std::path::PathBuf;

use hpl_reid::commands;
use hpl_reid::config::RunConfig;

fn main() -> hpl_reid::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/ablation_grid".into()));
    let mut cfg = RunConfig::desk();
    if let Some(seed) = args.next() {
        cfg.seed = seed.parse().expect("seed must be an integer");
    }
    // A shorter schedule than the preset keeps the four rows to a few minutes.
    cfg.stage1.epochs = 2;
    cfg.stage2.epochs = 8;
    cfg.stage2.warmup_epochs = 2;
    cfg.data.root = out.join("data");
    cfg.output.dir = out.join("rows");

    commands::generate(&cfg, &cfg.data.root, None, None)?;
    let data = commands::load_data(&cfg)?;
    let rows = commands::ablate(&cfg, &data)?;
    print!("{}", commands::render_table(&rows));
    for r in &rows {
        if let Some(s) = r.score() {
            println!("{:<14} score {:.4}", r.run, s);
        }
    }
    println!("tables and curves in {}", cfg.output.dir.display());
    Ok(())
}
