//! Builds identity-only and full hierarchical prompts for a few identities and
//! encodes them with the frozen prompt encoder.
//!
//! cargo run --example prompt_assembly -- [out_dir]

use std::path::PathBuf;

use candle_core::Device;
use hpl_reid::config::RunConfig;
use hpl_reid::data::{generate_synthetic, JointSampler, TrainingData};
use hpl_reid::prompt::PromptLayout;
use hpl_reid::train::Session;

fn describe(layout: &PromptLayout) -> String {
    let mut toks = vec!["[BOS]", "a", "photo", "of"];
    toks.extend(std::iter::repeat_n("[id]", layout.id_len));
    if layout.inst_start.is_some() {
        toks.push("and");
        toks.extend(std::iter::repeat_n("[inst]", layout.inst_len));
    }
    toks.extend(["person", "[EOS]"]);
    toks.join(" ")
}

fn main() -> hpl_reid::Result<()> {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "runs/prompt_assembly".into()),
    );
    let mut cfg = RunConfig::desk();
    cfg.data.synthetic.n_identities = 8;
    let g = generate_synthetic(&cfg.synthetic_spec(), &out)?;
    let data = TrainingData::from_paths(
        &g.t2i_path,
        &g.i2i_path,
        &cfg.data.correspondences,
        cfg.model.max_text_len,
    )?;

    let session = Session::stage1(&cfg, &data)?;
    let model = session.model();
    let p = model.prompts()?;
    for layout in [
        p.assembler.layout(None),
        p.assembler.layout(Some(p.inv_visual.num_tokens())),
    ] {
        println!("{} (EOS at {})", describe(&layout), layout.eos_index());
    }

    // Pseudo-tokens come from one sampled batch; the first three samples get prompts.
    let mut sampler = JointSampler::new(cfg.data.sampler.clone(), &data, 0)?;
    let batch = sampler.next_batch(&data, &Device::Cpu)?;
    let feats = model.vision.encode_image(&batch.images)?;
    let inst = p.inv_visual.invert_visual(&feats)?;
    let ids: Vec<usize> = batch.views.labels[..3].to_vec();
    let three = hpl_reid::prompt::PseudoPromptTokens {
        tokens: inst.tokens.narrow(0, 0, 3)?,
        ..inst
    };

    let id_only = p.assembler.assemble(&p.encoder, &p.bank, &ids, None)?;
    let full = p
        .assembler
        .assemble(&p.encoder, &p.bank, &ids, Some(&three))?;
    for seq in [&id_only, &full] {
        let emb = p.assembler.encode(&p.encoder, seq)?;
        println!(
            "{:?}: token embeddings {:?} -> joint embeddings {:?}",
            seq.kind,
            seq.embeddings.dims(),
            emb.dims()
        );
    }
    println!(
        "identities {ids:?}; prompt bank holds {} identities",
        p.bank.num_identities()
    );
    Ok(())
}
