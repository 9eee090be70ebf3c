//! Loads the desk preset, applies overrides from TOML text, and shows which
//! changes alter the training hash and which are rejected.
//!
//! cargo run --example config_overrides

use hpl_reid::config::RunConfig;

fn main() -> hpl_reid::Result<()> {
    let desk = RunConfig::desk();
    let base = desk.hash()?;
    println!("desk preset hash {}", &base[..16]);

    let mut text = desk.to_toml()?;
    text = text.replace("lambda1 = 0.4", "lambda1 = 0.2");
    let tweaked = RunConfig::from_toml(&text)?;
    println!(
        "lambda1 {} -> hash {}",
        tweaked.loss.lambda1,
        &tweaked.hash()?[..16]
    );

    // Output location and evaluation batching do not shape training.
    let mut moved = desk.clone();
    moved.output.dir = "elsewhere".into();
    moved.eval.batch_size = 7;
    println!("moved output keeps the hash: {}", moved.hash()? == base);

    let mut bad = desk.clone();
    bad.ablation.enable_hpl = false;
    match bad.validate() {
        Ok(()) => println!("unexpectedly valid"),
        Err(e) => println!("rejected: kind={} msg={}", e.kind(), e.detail()),
    }
    let mut bad = desk;
    bad.stage2.warmup_epochs = bad.stage2.epochs;
    if let Err(e) = bad.validate() {
        println!("rejected: kind={} msg={}", e.kind(), e.detail());
    }
    Ok(())
}
