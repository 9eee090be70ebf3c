//! Writes the synthetic manifest pair and summarizes what the loader sees.
//!
//! cargo run --example generate_data -- [out_dir] [identities] [images_per_identity]

use std::collections::BTreeSet;
use std::path::PathBuf;

use hpl_reid::config::RunConfig;
use hpl_reid::data::{generate_synthetic, Split, TrainingData};

fn main() -> hpl_reid::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/generated".into()));
    let cfg = RunConfig::desk();
    let mut spec = cfg.synthetic_spec();
    if let Some(n) = args.next() {
        spec.n_identities = n.parse().expect("identities must be an integer");
    }
    if let Some(n) = args.next() {
        spec.images_per_identity = n.parse().expect("images per identity must be an integer");
    }

    let g = generate_synthetic(&spec, &out)?;
    for m in [&g.t2i, &g.i2i] {
        let ids: BTreeSet<u64> = m.entries.iter().map(|e| e.identity).collect();
        let per_split = |s: Split| m.entries_in(s).count();
        println!(
            "{}: {} images, {} identities, train/query/gallery {}/{}/{}",
            m.meta.name,
            m.entries.len(),
            ids.len(),
            per_split(Split::Train),
            per_split(Split::Query),
            per_split(Split::Gallery)
        );
    }
    let shared = g
        .t2i
        .train_identities()
        .intersection(&g.i2i.train_identities())
        .count();
    println!("training identities in both manifests: {shared}");
    if let Some(e) = g.t2i.entries.iter().find(|e| !e.captions.is_empty()) {
        println!(
            "sample caption for person {}: \"{}\"",
            e.identity, e.captions[0]
        );
    }

    let data = TrainingData::from_paths(
        &g.t2i_path,
        &g.i2i_path,
        &cfg.data.correspondences,
        cfg.model.max_text_len,
    )?;
    println!(
        "unified label space: {} identities; vocabulary: {} words",
        data.num_identities(),
        data.vocab.len()
    );
    Ok(())
}
