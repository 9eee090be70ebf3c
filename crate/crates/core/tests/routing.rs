//! Task routing, parameter freezing and the captioned-subset discipline.

mod support;

use candle_core::Device;
use hpl_reid::data::JointSampler;
use hpl_reid::model::{stage1_trainable, stage2_trainable, PromptTerms};
use hpl_reid::objectives::scalar;
use hpl_reid::params::{GroupSet, ParamGroup};
use hpl_reid::train::{run_stage1, Session};
use support::*;

fn all_groups() -> GroupSet {
    [
        ParamGroup::VisualEncoder,
        ParamGroup::TextEncoder,
        ParamGroup::PromptEncoder,
        ParamGroup::IdentityPrompts,
        ParamGroup::VisualInversion,
        ParamGroup::TextInversion,
        ParamGroup::Heads,
        ParamGroup::Temperature,
    ]
    .into_iter()
    .collect()
}

#[test]
fn gradient_groups_match_the_documented_sets() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = tiny_setup(dir.path());

    let mut s1 = Session::stage1(&cfg, &data).unwrap();
    s1.step().unwrap();
    let want1: GroupSet = [
        ParamGroup::IdentityPrompts,
        ParamGroup::VisualInversion,
        ParamGroup::TextInversion,
    ]
    .into_iter()
    .collect();
    assert_eq!(stage1_trainable(), want1);
    assert_eq!(s1.gradient_groups.as_ref().unwrap(), &want1);

    let ckpt = run_stage1(&cfg, &data, &cfg.output.dir).unwrap();
    let mut s2 = Session::stage2(&cfg, &data, Some(&ckpt)).unwrap();
    s2.step().unwrap();
    let want2: GroupSet = [
        ParamGroup::VisualEncoder,
        ParamGroup::TextEncoder,
        ParamGroup::Heads,
        ParamGroup::Temperature,
    ]
    .into_iter()
    .collect();
    assert_eq!(stage2_trainable(true), want2);
    assert_eq!(s2.gradient_groups.as_ref().unwrap(), &want2);

    // Frozen temperature drops out of the set.
    let mut fixed = cfg.clone();
    fixed.loss.learnable_temperature = false;
    let mut s2 = Session::stage2(&fixed, &data, Some(&ckpt)).unwrap();
    s2.step().unwrap();
    let want: GroupSet = want2
        .iter()
        .copied()
        .filter(|g| *g != ParamGroup::Temperature)
        .collect();
    assert_eq!(s2.gradient_groups.as_ref().unwrap(), &want);
    assert!(all_groups().is_superset(&want2));
}

#[test]
fn frozen_weights_are_bitwise_unchanged_after_each_stage() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = tiny_setup(dir.path());

    let mut s1 = Session::stage1(&cfg, &data).unwrap();
    let before = snapshot(&s1.params);
    s1.run(&hpl_reid::train::stage_dir(&cfg.output.dir, 1))
        .unwrap();
    let after = snapshot(&s1.params);
    for (name, v) in &before {
        let g = ParamGroup::of(name).unwrap();
        if stage1_trainable().contains(&g) {
            continue;
        }
        assert_eq!(v, &after[name], "{name} moved during Stage I");
    }
    assert!(before
        .iter()
        .any(|(n, v)| n.starts_with("id_prompts") && v != &after[n]));

    let ckpt = hpl_reid::train::load_checkpoint(
        &hpl_reid::train::stage_dir(&cfg.output.dir, 1),
        Some(&cfg),
        false,
    )
    .unwrap();
    let mut s2 = Session::stage2(&cfg, &data, Some(&ckpt)).unwrap();
    let before = snapshot(&s2.params);
    s2.run(&hpl_reid::train::stage_dir(&cfg.output.dir, 2))
        .unwrap();
    let after = snapshot(&s2.params);
    let trainable = stage2_trainable(true);
    for (name, v) in &before {
        if !trainable.contains(&ParamGroup::of(name).unwrap()) {
            assert_eq!(v, &after[name], "{name} moved during Stage II");
        }
    }
    assert!(before
        .iter()
        .any(|(n, v)| n.starts_with("visual") && v != &after[n]));
    // Precomputed prompt embeddings still agree with a fresh computation.
    assert!(s2.audit_bank().unwrap() <= 1e-6);
}

#[test]
fn task_losses_only_see_their_own_class_embedding() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = tiny_setup(dir.path());
    let ckpt = run_stage1(&cfg, &data, &cfg.output.dir).unwrap();
    let s2 = Session::stage2(&cfg, &data, Some(&ckpt)).unwrap();
    let grads = routing_gradients(&s2, &cfg, &data);
    assert_eq!(grads.len(), 5);
    for g in grads {
        assert_eq!(
            g.other, 0.0,
            "{} reached the other task's class embedding",
            g.loss
        );
        assert!(g.own > 0.0, "{} ignores its own class embedding", g.loss);
    }
}

#[test]
fn image_only_samples_cannot_move_captioned_losses() {
    for (name, delta) in subset_deltas(20) {
        assert_eq!(delta, 0.0, "{name}");
    }
}

#[test]
fn image_only_pixels_cannot_move_captioned_losses_in_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = tiny_setup(dir.path());
    let ckpt = run_stage1(&cfg, &data, &cfg.output.dir).unwrap();
    let s2 = Session::stage2(&cfg, &data, Some(&ckpt)).unwrap();
    let mut sampler = JointSampler::new(cfg.data.sampler.clone(), &data, 11).unwrap();
    let batch = sampler.next_batch(&data, &Device::Cpu).unwrap();
    let terms = PromptTerms {
        hpl: true,
        cmpr: true,
    };
    let run = |b: &hpl_reid::data::JointBatch| {
        let p = s2
            .model()
            .stage2_losses(b, s2.bank_embeddings(), terms, &cfg.loss)
            .unwrap();
        [p.sdm, p.ilpa.unwrap(), p.cmpr.unwrap(), p.triplet].map(|t| scalar(&t).unwrap())
    };
    let base = run(&batch);
    let mut changed = batch.clone();
    changed.images.pixels = perturb(&batch.images.pixels, &batch.views.i2i, 3)
        .clamp(0.0, 1.0)
        .unwrap();
    let after = run(&changed);
    for k in 0..3 {
        assert_eq!(base[k].to_bits(), after[k].to_bits(), "term {k}");
    }
    assert_ne!(base[3], after[3], "perturbation had no effect at all");
}
