//! Hierarchical prompts.
//!
//! A prompt is the template "a photo of [id-tokens] and [inst-tokens] person"
//! (or "a photo of [id-tokens] person" for the identity-only reference) spliced
//! at the embedding level: template words carry ordinary vocabulary embeddings
//! from the frozen prompt encoder, `[id-tokens]` come from the learnable
//! [`IdentityPromptBank`], and `[inst-tokens]` are pseudo-tokens produced by an
//! [`InversionNetwork`] from one sample's visual or textual features.

use candle_core::{Tensor, D};

use crate::backbone::{
    ModelConfig, TextEncoder, TextFeatures, VisualFeatures, BOS_ID, EOS_ID, TOKEN_EMBED_STD,
};
use crate::error::{Error, Result};
use crate::nn::{AttentionMask, LayerNorm, Linear, Transformer};
use crate::params::{Init, ParamBuilder};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Visual,
    Textual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptKind {
    /// `T^v`: identity block plus vision-derived pseudo-tokens.
    FullVisual,
    /// `T^t`: identity block plus text-derived pseudo-tokens.
    FullTextual,
    /// `T^id`: identity block only.
    IdentityOnly,
}

/// `N_id x M_id` learnable token embeddings, one row per training identity.
#[derive(Clone, Debug)]
pub struct IdentityPromptBank {
    tokens: Tensor,
}

impl IdentityPromptBank {
    pub fn new(b: &ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        if cfg.num_identities == 0 {
            return Err(Error::Config(
                "num_identities must be resolved before building prompts".into(),
            ));
        }
        let tokens = b.get_no_decay(
            "tokens",
            (cfg.num_identities, cfg.id_tokens, cfg.txt_width),
            Init::TruncNormal(TOKEN_EMBED_STD),
        )?;
        Ok(Self { tokens })
    }

    pub fn num_identities(&self) -> usize {
        self.tokens.dim(0).unwrap_or(0)
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    /// Token blocks for the given identities, `[n, M_id, d_t]`.
    pub fn rows(&self, identities: &[usize]) -> Result<Tensor> {
        let n = self.num_identities();
        if let Some(&bad) = identities.iter().find(|&&y| y >= n) {
            return Err(Error::Label {
                label: bad,
                num_classes: n,
            });
        }
        let idx: Vec<u32> = identities.iter().map(|&y| y as u32).collect();
        let idx = Tensor::from_vec(idx, identities.len(), self.tokens.device())?;
        Ok(self.tokens.index_select(&idx, 0)?)
    }
}

/// Pseudo-tokens for a batch: `[batch, K, d_t]`.
#[derive(Clone, Debug)]
pub struct PseudoPromptTokens {
    pub tokens: Tensor,
    pub source: Modality,
}

/// Maps a feature sequence of one modality to `K` tokens in text embedding space.
///
/// `K` learnable queries are prepended to the adapter-mapped input sequence;
/// after the transformer blocks the outputs at the query positions are read out.
#[derive(Clone, Debug)]
pub struct InversionNetwork {
    adapter: Linear,
    queries: Tensor,
    blocks: Transformer,
    /// Places the read-outs at the scale of vocabulary embeddings.
    ln_out: LayerNorm,
    modality: Modality,
}

impl InversionNetwork {
    pub fn new(
        b: &ParamBuilder,
        cfg: &ModelConfig,
        source_width: usize,
        modality: Modality,
    ) -> Result<Self> {
        Ok(Self {
            adapter: Linear::new(&b.pp("adapter"), source_width, cfg.txt_width, true)?,
            queries: b.get_no_decay(
                "queries",
                (cfg.inst_tokens, cfg.txt_width),
                Init::TruncNormal(0.02),
            )?,
            blocks: Transformer::new(
                &b.pp("blocks"),
                cfg.txt_width,
                cfg.inversion_layers,
                cfg.inversion_heads,
            )?,
            ln_out: LayerNorm::with_gain(&b.pp("ln_out"), cfg.txt_width, TOKEN_EMBED_STD)?,
            modality,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.queries.dim(0).unwrap_or(0)
    }

    /// Core mapping over `[B, L, source_width]`; `valid` masks padded input positions.
    pub fn forward(
        &self,
        features: &Tensor,
        valid: Option<&[Vec<bool>]>,
    ) -> Result<PseudoPromptTokens> {
        let (b, len, _) = features.dims3()?;
        let k = self.num_tokens();
        let width = self.queries.dim(1)?;
        let mapped = self.adapter.forward(features)?;
        let queries = self.queries.unsqueeze(0)?.broadcast_as((b, k, width))?;
        let seq = Tensor::cat(&[&queries, &mapped], 1)?;
        let mask = match valid {
            Some(valid) => {
                if valid.len() != b || valid.iter().any(|r| r.len() != len) {
                    return Err(Error::Input("key mask does not match feature shape".into()));
                }
                let full: Vec<Vec<bool>> = valid
                    .iter()
                    .map(|row| {
                        std::iter::repeat(true)
                            .take(k)
                            .chain(row.iter().copied())
                            .collect()
                    })
                    .collect();
                Some(AttentionMask::keys(&full, seq.dtype(), seq.device())?)
            }
            None => None,
        };
        let location = match self.modality {
            Modality::Visual => "visual inversion",
            Modality::Textual => "textual inversion",
        };
        let out = self.blocks.forward(&seq, mask.as_ref(), location)?;
        Ok(PseudoPromptTokens {
            tokens: self.ln_out.forward(&out.narrow(1, 0, k)?)?,
            source: self.modality,
        })
    }

    /// Pseudo-tokens from the full visual sequence (class and patch tokens).
    pub fn invert_visual(&self, feats: &VisualFeatures) -> Result<PseudoPromptTokens> {
        if self.modality != Modality::Visual {
            return Err(Error::Config(
                "textual inversion network given visual features".into(),
            ));
        }
        self.forward(&feats.sequence, None)
    }

    /// Pseudo-tokens from the text token-feature sequence, ignoring padding.
    pub fn invert_textual(&self, feats: &TextFeatures) -> Result<PseudoPromptTokens> {
        if self.modality != Modality::Textual {
            return Err(Error::Config(
                "visual inversion network given textual features".into(),
            ));
        }
        let valid = feats.valid_keys()?;
        self.forward(&feats.token_features, Some(&valid))
    }
}

/// Vocabulary ids of the fixed template words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateWords {
    pub a: u32,
    pub photo: u32,
    pub of: u32,
    pub and: u32,
    pub person: u32,
}

pub const TEMPLATE_WORDS: [&str; 5] = ["a", "photo", "of", "and", "person"];

/// Spliced prompt embeddings for a batch.
#[derive(Clone, Debug)]
pub struct PromptSequence {
    /// `[batch, L, d_t]`
    pub embeddings: Tensor,
    pub eos_index: usize,
    pub kind: PromptKind,
}

impl PromptSequence {
    pub fn len(&self) -> usize {
        self.eos_index + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Position bookkeeping for one prompt kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PromptLayout {
    pub id_start: usize,
    pub id_len: usize,
    pub inst_start: Option<usize>,
    pub inst_len: usize,
    pub len: usize,
}

impl PromptLayout {
    /// `[BOS] a photo of [id] (and [inst])? person [EOS]`
    pub fn new(id_len: usize, inst_len: Option<usize>) -> Self {
        let id_start = 4;
        match inst_len {
            None => Self {
                id_start,
                id_len,
                inst_start: None,
                inst_len: 0,
                len: id_start + id_len + 2,
            },
            Some(k) => Self {
                id_start,
                id_len,
                inst_start: Some(id_start + id_len + 1),
                inst_len: k,
                len: id_start + id_len + 1 + k + 2,
            },
        }
    }

    pub fn eos_index(&self) -> usize {
        self.len - 1
    }
}

/// Builds and encodes hierarchical prompts with the frozen prompt encoder.
#[derive(Clone, Debug)]
pub struct PromptAssembler {
    words: TemplateWords,
    id_tokens: usize,
}

impl PromptAssembler {
    pub fn new(words: TemplateWords, id_tokens: usize) -> Self {
        Self { words, id_tokens }
    }

    pub fn layout(&self, inst_len: Option<usize>) -> PromptLayout {
        PromptLayout::new(self.id_tokens, inst_len)
    }

    /// Splices identity blocks (and optional pseudo-tokens) into the template.
    ///
    /// Word embeddings are taken from `encoder`'s vocabulary table.
    pub fn assemble(
        &self,
        encoder: &TextEncoder,
        bank: &IdentityPromptBank,
        identities: &[usize],
        inst: Option<&PseudoPromptTokens>,
    ) -> Result<PromptSequence> {
        let n = identities.len();
        if n == 0 {
            return Err(Error::Input(
                "prompt assembly needs at least one identity".into(),
            ));
        }
        let id_block = bank.rows(identities)?;
        let width = id_block.dim(D::Minus1)?;
        let words = |ids: &[u32]| -> Result<Tensor> {
            let e = encoder.embed_ids(ids)?;
            Ok(e.unsqueeze(0)?.broadcast_as((n, ids.len(), width))?)
        };
        let w = &self.words;
        let head = words(&[BOS_ID, w.a, w.photo, w.of])?;
        let tail = words(&[w.person, EOS_ID])?;
        let (parts, kind, layout) = match inst {
            None => (
                vec![head, id_block, tail],
                PromptKind::IdentityOnly,
                self.layout(None),
            ),
            Some(p) => {
                let (pb, k, pw) = p.tokens.dims3()?;
                if pb != n || pw != width {
                    return Err(Error::Config(format!(
                        "pseudo-tokens are [{pb}, {k}, {pw}], expected batch {n} and width {width}"
                    )));
                }
                let kind = match p.source {
                    Modality::Visual => PromptKind::FullVisual,
                    Modality::Textual => PromptKind::FullTextual,
                };
                (
                    vec![head, id_block, words(&[w.and])?, p.tokens.clone(), tail],
                    kind,
                    self.layout(Some(k)),
                )
            }
        };
        let refs: Vec<&Tensor> = parts.iter().collect();
        let embeddings = Tensor::cat(&refs, 1)?;
        debug_assert_eq!(embeddings.dim(1)?, layout.len);
        Ok(PromptSequence {
            embeddings,
            eos_index: layout.eos_index(),
            kind,
        })
    }

    /// Joint-space embedding at the EOS position, `[batch, d_e]`.
    pub fn encode(&self, encoder: &TextEncoder, seq: &PromptSequence) -> Result<Tensor> {
        let b = seq.embeddings.dim(0)?;
        let eos = vec![seq.eos_index; b];
        Ok(encoder.encode_embeddings(&seq.embeddings, &eos)?.eos)
    }
}
