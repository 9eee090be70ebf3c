//! The full model: task-routed encoders, hierarchical prompt modules and identity heads,
//! plus the per-stage loss assembly over a joint batch.

use std::cell::RefCell;

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{ModelConfig, TextEncoder, TextFeatures, VisionEncoder, VisualFeatures};
use crate::data::JointBatch;
use crate::error::{Error, Result};
use crate::objectives::{
    cic_loss, cmpr_loss, id_loss_i2i, id_loss_t2i, ilpa_loss, inversion_consistency,
    prompt_contrastive, sdm_loss, select_rows, triplet_loss, BatchViews, IdentityHeads,
    LossWeights, Stage1Parts, Stage2Parts,
};
use crate::params::{GroupSet, Init, ParamBuilder, ParamGroup, Params};
use crate::prompt::{
    IdentityPromptBank, InversionNetwork, Modality, PromptAssembler, TemplateWords,
};

/// Prompt bank, inversion networks and the frozen prompt encoder.
#[derive(Clone, Debug)]
pub struct PromptModules {
    pub encoder: TextEncoder,
    pub bank: IdentityPromptBank,
    pub inv_visual: InversionNetwork,
    pub inv_text: InversionNetwork,
    pub assembler: PromptAssembler,
}

#[derive(Clone, Debug)]
pub struct HplModel {
    pub cfg: ModelConfig,
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    pub prompts: Option<PromptModules>,
    pub heads: IdentityHeads,
    log_scale: Tensor,
}

/// Which prompt-derived Stage II terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PromptTerms {
    pub hpl: bool,
    pub cmpr: bool,
}

impl HplModel {
    fn build(
        b: &ParamBuilder,
        cfg: &ModelConfig,
        words: Option<&TemplateWords>,
        temperature: f64,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.num_identities == 0 || cfg.vocab_size == 0 {
            return Err(Error::Config(
                "vocab_size and num_identities must be resolved before building".into(),
            ));
        }
        let prompts = match words {
            Some(w) => Some(PromptModules {
                encoder: TextEncoder::new(&b.pp("prompt_encoder"), cfg)?,
                bank: IdentityPromptBank::new(&b.pp("id_prompts"), cfg)?,
                inv_visual: InversionNetwork::new(
                    &b.pp("inv_visual"),
                    cfg,
                    cfg.joint_dim,
                    Modality::Visual,
                )?,
                inv_text: InversionNetwork::new(
                    &b.pp("inv_text"),
                    cfg,
                    cfg.txt_width,
                    Modality::Textual,
                )?,
                assembler: PromptAssembler::new(w.clone(), cfg.id_tokens),
            }),
            None => None,
        };
        Ok(Self {
            cfg: cfg.clone(),
            vision: VisionEncoder::new(&b.pp("visual"), cfg)?,
            text: TextEncoder::new(&b.pp("text"), cfg)?,
            prompts,
            heads: IdentityHeads::new(&b.pp("heads"), cfg.joint_dim, cfg.num_identities)?,
            log_scale: b.pp("temperature").get_no_decay(
                "log_scale",
                (),
                Init::Const(-temperature.ln()),
            )?,
        })
    }

    /// Creates every parameter in `params`. The prompt encoder starts as a copy of the text encoder.
    pub fn initialize(
        params: &Params,
        cfg: &ModelConfig,
        words: Option<&TemplateWords>,
        temperature: f64,
        rng: &RefCell<ChaCha8Rng>,
    ) -> Result<()> {
        Self::build(&ParamBuilder::init(params, rng), cfg, words, temperature)?;
        if words.is_some() {
            params.copy_prefix("text", "prompt_encoder")?;
        }
        Ok(())
    }

    /// A view over existing parameters where only `trainable` groups carry gradients.
    pub fn bind(
        params: &Params,
        trainable: &GroupSet,
        cfg: &ModelConfig,
        words: Option<&TemplateWords>,
        temperature: f64,
    ) -> Result<Self> {
        Self::build(
            &ParamBuilder::bind(params, trainable),
            cfg,
            words,
            temperature,
        )
    }

    pub fn temperature(&self) -> Result<Tensor> {
        Ok(self.log_scale.neg()?.exp()?)
    }

    pub fn prompts(&self) -> Result<&PromptModules> {
        self.prompts
            .as_ref()
            .ok_or_else(|| Error::Config("model was built without hierarchical prompts".into()))
    }

    /// `T^id` embeddings of every identity, `[N_id, d_e]`, computed in chunks.
    pub fn identity_prompt_embeddings(&self, chunk: usize) -> Result<Tensor> {
        let p = self.prompts()?;
        let ids: Vec<usize> = (0..p.bank.num_identities()).collect();
        let mut parts = Vec::new();
        for c in ids.chunks(chunk.max(1)) {
            let seq = p.assembler.assemble(&p.encoder, &p.bank, c, None)?;
            parts.push(p.assembler.encode(&p.encoder, &seq)?);
        }
        Ok(Tensor::cat(&parts, 0)?)
    }

    pub fn stage1_losses(&self, batch: &JointBatch) -> Result<Stage1Parts> {
        let p = self.prompts()?;
        let views = &batch.views;
        let temp = self.temperature()?;
        let vis = self.vision.encode_image(&batch.images)?;
        let txt = self.text.encode_text(&batch.captions)?;
        let pv = p.inv_visual.invert_visual(&vis)?;
        let pt = p.inv_text.invert_textual(&txt)?;

        let tv = p
            .assembler
            .assemble(&p.encoder, &p.bank, &views.labels, Some(&pv))?;
        let vis_prompt = p.assembler.encode(&p.encoder, &tv)?;
        let tt = p
            .assembler
            .assemble(&p.encoder, &p.bank, &views.t2i_labels(), Some(&pt))?;
        let txt_prompt = p.assembler.encode(&p.encoder, &tt)?;
        let tid = p
            .assembler
            .assemble(&p.encoder, &p.bank, &views.labels, None)?;
        let refs = p.assembler.encode(&p.encoder, &tid)?;

        let (t2i, i2t) = prompt_contrastive(&vis.cls_t2i, &refs, &temp)?;
        let ic = inversion_consistency(&vis_prompt, &vis.cls_t2i, &txt_prompt, &txt.eos, views)?;
        Ok(Stage1Parts { t2i, i2t, ic })
    }

    /// `bank_embeddings` are the precomputed `T^id` embeddings, required when `terms.hpl`.
    pub fn stage2_losses(
        &self,
        batch: &JointBatch,
        bank_embeddings: Option<&Tensor>,
        terms: PromptTerms,
        weights: &LossWeights,
    ) -> Result<Stage2Parts> {
        let vis = self.vision.encode_image(&batch.images)?;
        let txt = self.text.encode_text(&batch.captions)?;
        self.stage2_losses_from_features(&vis, &txt, &batch.views, bank_embeddings, terms, weights)
    }

    /// Stage II terms from already encoded features; exposes the routed class
    /// embeddings as graph nodes of their own.
    pub fn stage2_losses_from_features(
        &self,
        vis: &VisualFeatures,
        txt: &TextFeatures,
        views: &BatchViews,
        bank_embeddings: Option<&Tensor>,
        terms: PromptTerms,
        weights: &LossWeights,
    ) -> Result<Stage2Parts> {
        let temp = self.temperature()?;
        let sdm = sdm_loss(&vis.cls_t2i, &txt.eos, views, &temp)?;
        let id_t2i = id_loss_t2i(&vis.cls_t2i, &txt.eos, views, &self.heads.t2i_classifier)?;
        let triplet = triplet_loss(&vis.cls_i2i, views, weights.triplet_margin)?;
        let id_i2i = id_loss_i2i(
            &vis.cls_i2i,
            &views.labels,
            &self.heads.i2i_neck,
            &self.heads.i2i_classifier,
        )?;

        let (mut cic, mut ilpa, mut cmpr) = (None, None, None);
        if terms.hpl {
            let p = self.prompts()?;
            let bank = bank_embeddings.ok_or_else(|| {
                Error::Config("identity prompt embeddings were not precomputed".into())
            })?;
            cic = Some(cic_loss(
                &vis.cls_i2i,
                bank,
                &views.labels,
                p.bank.num_identities(),
                &temp,
            )?);

            // Both prompt-alignment terms only concern the captioned samples.
            let sub = views.restricted_to_t2i();
            let cls_t2i = select_rows(&vis.cls_t2i, &views.t2i)?;
            let sequence = select_rows(&vis.sequence, &views.t2i)?;
            let pv = p.inv_visual.forward(&sequence, None)?;
            let pt = p.inv_text.invert_textual(txt)?;
            let labels = sub.labels.clone();
            let tv = p
                .assembler
                .assemble(&p.encoder, &p.bank, &labels, Some(&pv))?;
            let tt = p
                .assembler
                .assemble(&p.encoder, &p.bank, &labels, Some(&pt))?;
            let vis_prompt = p.assembler.encode(&p.encoder, &tv)?;
            let txt_prompt = p.assembler.encode(&p.encoder, &tt)?;
            ilpa = Some(ilpa_loss(&txt_prompt, &cls_t2i, &vis_prompt, &txt.eos, &sub)?.loss);
            if terms.cmpr {
                cmpr = Some(cmpr_loss(&pt.tokens, &pv.tokens, &sub)?);
            }
        } else if terms.cmpr {
            return Err(Error::Config(
                "the prompt regularizer requires hierarchical prompts".into(),
            ));
        }
        Ok(Stage2Parts {
            sdm,
            id_t2i,
            triplet,
            id_i2i,
            cic,
            ilpa,
            cmpr,
        })
    }

    /// Embeddings used for retrieval: `(cls_t2i, cls_i2i)`, both `[n, d_e]`.
    pub fn embed_images(&self, pixels: &Tensor) -> Result<(Tensor, Tensor)> {
        let f = self.vision.encode_pixels(pixels)?;
        Ok((f.cls_t2i.detach(), f.cls_i2i.detach()))
    }

    pub fn embed_captions(&self, captions: &[Vec<u32>]) -> Result<Tensor> {
        Ok(self.text.encode_text(captions)?.eos.detach())
    }
}

/// Groups updated in prompt construction.
pub fn stage1_trainable() -> GroupSet {
    [
        ParamGroup::IdentityPrompts,
        ParamGroup::VisualInversion,
        ParamGroup::TextInversion,
    ]
    .into_iter()
    .collect()
}

/// Groups updated in representation learning.
pub fn stage2_trainable(learnable_temperature: bool) -> GroupSet {
    let mut g: GroupSet = [
        ParamGroup::VisualEncoder,
        ParamGroup::TextEncoder,
        ParamGroup::Heads,
    ]
    .into_iter()
    .collect();
    if learnable_temperature {
        g.insert(ParamGroup::Temperature);
    }
    g
}
