//! The trainable dual encoder.
//!
//! The vision side is a ViT carrying two class tokens, one routed to the
//! text-to-image objectives and one to the image-to-image objectives. With
//! routing disabled it falls back to a single class token shared by both tasks.
//! The text side is a causal transformer pooled at the EOS position. Both
//! project tokenwise into the joint embedding space.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ensure_finite, AttentionMask, LayerNorm, Linear, Transformer};
use crate::params::{Init, ParamBuilder};

/// Architecture hyperparameters shared by every module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub vis_width: usize,
    pub vis_layers: usize,
    pub vis_heads: usize,
    pub txt_width: usize,
    pub txt_layers: usize,
    pub txt_heads: usize,
    pub joint_dim: usize,
    /// Filled in from the training vocabulary when left at 0.
    pub vocab_size: usize,
    pub max_text_len: usize,
    /// Filled in from identity unification when left at 0.
    pub num_identities: usize,
    /// Learnable tokens per identity prompt.
    pub id_tokens: usize,
    /// Pseudo-tokens produced by each inversion network.
    pub inst_tokens: usize,
    pub inversion_layers: usize,
    pub inversion_heads: usize,
    /// Two class tokens (task routing) or one shared token.
    pub dual_class_tokens: bool,
}

impl Default for ModelConfig {
    /// ViT-B/16 image tower and a 512-wide text tower at 384x128 input.
    fn default() -> Self {
        Self {
            image_height: 384,
            image_width: 128,
            channels: 3,
            patch_size: 16,
            vis_width: 768,
            vis_layers: 12,
            vis_heads: 12,
            txt_width: 512,
            txt_layers: 12,
            txt_heads: 8,
            joint_dim: 512,
            vocab_size: 0,
            max_text_len: 77,
            num_identities: 0,
            id_tokens: 4,
            inst_tokens: 4,
            inversion_layers: 4,
            inversion_heads: 8,
            dual_class_tokens: true,
        }
    }
}

/// Words of the prompt template outside the spliced slots: "a photo of", "and", "person".
pub const PROMPT_TEMPLATE_WORDS: usize = 5;

impl ModelConfig {
    /// Minutes-scale CPU preset.
    pub fn desk() -> Self {
        Self {
            image_height: 64,
            image_width: 32,
            channels: 3,
            patch_size: 8,
            vis_width: 64,
            vis_layers: 2,
            vis_heads: 4,
            txt_width: 64,
            txt_layers: 2,
            txt_heads: 4,
            joint_dim: 64,
            vocab_size: 0,
            max_text_len: 77,
            num_identities: 0,
            id_tokens: 4,
            inst_tokens: 4,
            inversion_layers: 2,
            inversion_heads: 4,
            dual_class_tokens: true,
        }
    }

    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn num_class_tokens(&self) -> usize {
        if self.dual_class_tokens {
            2
        } else {
            1
        }
    }

    /// Visual sequence length: patches plus class tokens.
    pub fn visual_seq_len(&self) -> usize {
        self.num_patches() + self.num_class_tokens()
    }

    /// Longest prompt: BOS, template words, both spliced blocks, EOS.
    pub fn max_prompt_len(&self) -> usize {
        PROMPT_TEMPLATE_WORDS + self.id_tokens + self.inst_tokens + 2
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0
            || self.image_height % self.patch_size != 0
            || self.image_width % self.patch_size != 0
        {
            return fail(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            ));
        }
        for (name, width, heads) in [
            ("vis", self.vis_width, self.vis_heads),
            ("txt", self.txt_width, self.txt_heads),
            ("inversion", self.txt_width, self.inversion_heads),
        ] {
            if heads == 0 || width % heads != 0 {
                return fail(format!(
                    "{name} width {width} not divisible by {heads} heads"
                ));
            }
        }
        if self.max_text_len < self.max_prompt_len() {
            return fail(format!(
                "max_text_len {} shorter than the longest prompt ({})",
                self.max_text_len,
                self.max_prompt_len()
            ));
        }
        if self.channels == 0 || self.joint_dim == 0 || self.id_tokens == 0 || self.inst_tokens == 0
        {
            return fail("channels, joint_dim, id_tokens and inst_tokens must be positive".into());
        }
        Ok(())
    }
}

/// Whether an image came with paired captions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    T2iPaired,
    I2iOnly,
}

#[derive(Clone, Debug)]
pub struct ImageBatch {
    /// `[batch, C, H, W]` with values in `[0, 1]`.
    pub pixels: Tensor,
    pub identity: Vec<usize>,
    pub camera: Vec<usize>,
    pub source: Vec<ImageSource>,
}

impl ImageBatch {
    pub fn len(&self) -> usize {
        self.identity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identity.is_empty()
    }

    /// Checks shape agreement with the model and label range.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let (b, c, h, w) = self.pixels.dims4()?;
        if (c, h, w) != (cfg.channels, cfg.image_height, cfg.image_width) {
            return Err(Error::Config(format!(
                "image batch is {c}x{h}x{w}, model expects {}x{}x{}",
                cfg.channels, cfg.image_height, cfg.image_width
            )));
        }
        if b != self.identity.len() || b != self.camera.len() || b != self.source.len() {
            return Err(Error::Input("image batch metadata length mismatch".into()));
        }
        if cfg.num_identities > 0 {
            if let Some(&bad) = self.identity.iter().find(|&&y| y >= cfg.num_identities) {
                return Err(Error::Label {
                    label: bad,
                    num_classes: cfg.num_identities,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct VisualFeatures {
    /// `[batch, d_e]`
    pub cls_t2i: Tensor,
    /// `[batch, d_e]`; the same tensor as `cls_t2i` when routing is off.
    pub cls_i2i: Tensor,
    /// `[batch, N, d_e]`
    pub patch_tokens: Tensor,
    /// Full projected sequence `[batch, N + class tokens, d_e]`, class tokens first.
    pub sequence: Tensor,
}

#[derive(Clone, Debug)]
pub struct TextFeatures {
    /// `[batch, d_e]`
    pub eos: Tensor,
    /// Final-layer token states `[batch, L, d_t]` before projection.
    pub token_features: Tensor,
    pub eos_index: Vec<usize>,
}

impl TextFeatures {
    /// Key-validity mask: positions up to and including EOS.
    pub fn valid_keys(&self) -> Result<Vec<Vec<bool>>> {
        let len = self.token_features.dim(1)?;
        Ok(self
            .eos_index
            .iter()
            .map(|&e| (0..len).map(|j| j <= e).collect())
            .collect())
    }
}

#[derive(Clone, Debug)]
pub struct VisionEncoder {
    patch_embed: Linear,
    class_tokens: Tensor,
    positions: Tensor,
    ln_pre: LayerNorm,
    transformer: Transformer,
    ln_post: LayerNorm,
    proj: Linear,
    cfg: ModelConfig,
}

impl VisionEncoder {
    pub fn new(b: &ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let patch_dim = cfg.channels * cfg.patch_size * cfg.patch_size;
        let n_cls = cfg.num_class_tokens();
        Ok(Self {
            patch_embed: Linear::new(&b.pp("patch_embed"), patch_dim, cfg.vis_width, false)?,
            // Row 0 is the T2I token; row 1 (when present) the I2I token, each with its own position.
            class_tokens: b.get_no_decay(
                "class_tokens",
                (n_cls, cfg.vis_width),
                Init::TruncNormal(0.02),
            )?,
            positions: b.get_no_decay(
                "positions",
                (cfg.num_patches() + n_cls, cfg.vis_width),
                Init::TruncNormal(0.02),
            )?,
            ln_pre: LayerNorm::new(&b.pp("ln_pre"), cfg.vis_width)?,
            transformer: Transformer::new(
                &b.pp("blocks"),
                cfg.vis_width,
                cfg.vis_layers,
                cfg.vis_heads,
            )?,
            ln_post: LayerNorm::new(&b.pp("ln_post"), cfg.vis_width)?,
            proj: Linear::new(&b.pp("proj"), cfg.vis_width, cfg.joint_dim, false)?,
            cfg: cfg.clone(),
        })
    }

    fn patchify(&self, pixels: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = pixels.dims4()?;
        let p = self.cfg.patch_size;
        let (gh, gw) = (h / p, w / p);
        Ok(pixels
            .reshape(vec![b, c, gh, p, gw, p])?
            .permute(vec![0, 2, 4, 1, 3, 5])?
            .contiguous()?
            .reshape((b, gh * gw, c * p * p))?)
    }

    /// Encodes a batch of images into routed class embeddings and patch embeddings.
    pub fn encode_image(&self, batch: &ImageBatch) -> Result<VisualFeatures> {
        batch.validate(&self.cfg)?;
        self.encode_pixels(&batch.pixels)
    }

    pub fn encode_pixels(&self, pixels: &Tensor) -> Result<VisualFeatures> {
        let (b, c, h, w) = pixels.dims4()?;
        if (c, h, w)
            != (
                self.cfg.channels,
                self.cfg.image_height,
                self.cfg.image_width,
            )
        {
            return Err(Error::Config(format!(
                "pixels are {c}x{h}x{w}, model expects {}x{}x{}",
                self.cfg.channels, self.cfg.image_height, self.cfg.image_width
            )));
        }
        let x = ((pixels.to_dtype(self.class_tokens.dtype())? - 0.5)? * 4.0)?;
        let patches = self.patch_embed.forward(&self.patchify(&x)?)?;
        let n_cls = self.cfg.num_class_tokens();
        let cls = self
            .class_tokens
            .unsqueeze(0)?
            .broadcast_as((b, n_cls, self.cfg.vis_width))?;
        let seq = Tensor::cat(&[&cls, &patches], 1)?.broadcast_add(&self.positions)?;
        let seq = self.ln_pre.forward(&seq)?;
        let seq = self.transformer.forward(&seq, None, "visual encoder")?;
        let seq = self.proj.forward(&self.ln_post.forward(&seq)?)?;
        ensure_finite(&seq, "visual projection")?;
        let cls_t2i = seq.narrow(1, 0, 1)?.squeeze(1)?;
        let cls_i2i = if n_cls == 2 {
            seq.narrow(1, 1, 1)?.squeeze(1)?
        } else {
            cls_t2i.clone()
        };
        let patch_tokens = seq.narrow(1, n_cls, self.cfg.num_patches())?;
        Ok(VisualFeatures {
            cls_t2i,
            cls_i2i,
            patch_tokens,
            sequence: seq,
        })
    }
}

/// Special token ids shared by tokenizer and encoders.
/// Init scale of vocabulary embeddings; spliced prompt tokens start at the same scale.
pub const TOKEN_EMBED_STD: f64 = 0.02;

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;

#[derive(Clone, Debug)]
pub struct TextEncoder {
    token_embedding: Tensor,
    positions: Tensor,
    transformer: Transformer,
    ln_final: LayerNorm,
    proj: Linear,
    max_len: usize,
}

impl TextEncoder {
    pub fn new(b: &ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        if cfg.vocab_size <= EOS_ID as usize {
            return Err(Error::Config(format!(
                "vocab_size {} too small",
                cfg.vocab_size
            )));
        }
        Ok(Self {
            token_embedding: b.get_no_decay(
                "token_embedding",
                (cfg.vocab_size, cfg.txt_width),
                Init::TruncNormal(TOKEN_EMBED_STD),
            )?,
            positions: b.get_no_decay(
                "positions",
                (cfg.max_text_len, cfg.txt_width),
                Init::TruncNormal(0.01),
            )?,
            transformer: Transformer::new(
                &b.pp("blocks"),
                cfg.txt_width,
                cfg.txt_layers,
                cfg.txt_heads,
            )?,
            ln_final: LayerNorm::new(&b.pp("ln_final"), cfg.txt_width)?,
            proj: Linear::new(&b.pp("proj"), cfg.txt_width, cfg.joint_dim, false)?,
            max_len: cfg.max_text_len,
        })
    }

    pub fn vocab_size(&self) -> Result<usize> {
        Ok(self.token_embedding.dim(0)?)
    }

    /// Embedding rows for the given ids, `[ids.len(), d_t]`.
    pub fn embed_ids(&self, ids: &[u32]) -> Result<Tensor> {
        let vocab = self.vocab_size()?;
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {vocab}"
            )));
        }
        let idx = Tensor::from_vec(ids.to_vec(), ids.len(), self.token_embedding.device())?;
        Ok(self.token_embedding.index_select(&idx, 0)?)
    }

    /// Encodes token-id sequences. Each must end with EOS and fit in `max_text_len`.
    pub fn encode_text(&self, sequences: &[Vec<u32>]) -> Result<TextFeatures> {
        if sequences.is_empty() {
            return Err(Error::Input("empty caption batch".into()));
        }
        let mut eos_index = Vec::with_capacity(sequences.len());
        for (i, s) in sequences.iter().enumerate() {
            if s.len() > self.max_len {
                return Err(Error::Input(format!(
                    "sequence {i} has {} tokens, limit is {}",
                    s.len(),
                    self.max_len
                )));
            }
            if s.last() != Some(&EOS_ID) {
                return Err(Error::Input(format!("sequence {i} does not end with EOS")));
            }
            eos_index.push(s.len() - 1);
        }
        let len = sequences.iter().map(Vec::len).max().unwrap_or(0);
        let flat: Vec<u32> = sequences
            .iter()
            .flat_map(|s| s.iter().copied().chain(std::iter::repeat(PAD_ID)).take(len))
            .collect();
        let emb = self.embed_ids(&flat)?.reshape((sequences.len(), len, ()))?;
        self.encode_embeddings(&emb, &eos_index)
    }

    /// Runs the transformer over pre-built token embeddings `[B, L, d_t]`.
    pub fn encode_embeddings(
        &self,
        embeddings: &Tensor,
        eos_index: &[usize],
    ) -> Result<TextFeatures> {
        let (b, len, width) = embeddings.dims3()?;
        if len > self.max_len {
            return Err(Error::Input(format!(
                "sequence length {len} exceeds {}",
                self.max_len
            )));
        }
        if eos_index.len() != b || eos_index.iter().any(|&e| e >= len) {
            return Err(Error::Input("eos index out of range".into()));
        }
        let x = embeddings.broadcast_add(&self.positions.narrow(0, 0, len)?)?;
        let mask = AttentionMask::causal(len, x.dtype(), x.device())?;
        let x = self.transformer.forward(&x, Some(&mask), "text encoder")?;
        let token_features = self.ln_final.forward(&x)?;
        let flat_idx: Vec<u32> = eos_index
            .iter()
            .enumerate()
            .map(|(i, &e)| (i * len + e) as u32)
            .collect();
        let idx = Tensor::from_vec(flat_idx, b, x.device())?;
        let pooled = token_features
            .reshape((b * len, width))?
            .index_select(&idx, 0)?;
        let eos = self.proj.forward(&pooled)?;
        ensure_finite(&eos, "text projection")?;
        Ok(TextFeatures {
            eos,
            token_features,
            eos_index: eos_index.to_vec(),
        })
    }
}

/// L2-normalizes along the last dimension. Zero-norm rows are an error.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norms = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let smallest = norms
        .flatten_all()?
        .min(0)?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?;
    if !(smallest > 0.0) {
        return Err(Error::numeric(
            "l2_normalize",
            format!("vector with norm {smallest}"),
        ));
    }
    Ok(x.broadcast_div(&norms)?)
}

/// Cosine similarity. Vectors `[d]` give a scalar; batches `[n, d]`, `[m, d]` give `[n, m]`.
pub fn cosine_sim(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let da = a.dim(D::Minus1)?;
    let db = b.dim(D::Minus1)?;
    if da != db {
        return Err(Error::Config(format!(
            "cosine_sim dims differ: {da} vs {db}"
        )));
    }
    let a2 = if a.rank() == 1 {
        a.unsqueeze(0)?
    } else {
        a.clone()
    };
    let b2 = if b.rank() == 1 {
        b.unsqueeze(0)?
    } else {
        b.clone()
    };
    let sim = l2_normalize(&a2)?.matmul(&l2_normalize(&b2)?.t()?)?;
    // Rounding can push |cos| a hair past 1.
    let sim = sim.clamp(-1.0, 1.0)?;
    match (a.rank(), b.rank()) {
        (1, 1) => Ok(sim.squeeze(0)?.squeeze(0)?),
        (1, _) => Ok(sim.squeeze(0)?),
        (_, 1) => Ok(sim.squeeze(1)?),
        _ => Ok(sim),
    }
}

/// Pixel tensor from interleaved HWC `u8` images.
pub fn pixels_from_rgb(
    images: &[&[u8]],
    height: usize,
    width: usize,
    device: &Device,
) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * 3 * height * width);
    for img in images {
        if img.len() != height * width * 3 {
            return Err(Error::Input(format!(
                "image buffer has {} bytes, expected {}",
                img.len(),
                height * width * 3
            )));
        }
        for ch in 0..3 {
            for px in 0..height * width {
                data.push(img[px * 3 + ch] as f32 / 255.0);
            }
        }
    }
    Ok(Tensor::from_vec(
        data,
        (images.len(), 3, height, width),
        device,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::cell::RefCell;

    fn desk(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            num_identities: 4,
            ..ModelConfig::desk()
        }
    }

    fn build(cfg: &ModelConfig) -> (Params, VisionEncoder, TextEncoder) {
        let params = Params::new(Device::Cpu, DType::F32);
        let rng = RefCell::new(ChaCha8Rng::seed_from_u64(11));
        let b = ParamBuilder::init(&params, &rng);
        let v = VisionEncoder::new(&b.pp("visual"), cfg).unwrap();
        let t = TextEncoder::new(&b.pp("text"), cfg).unwrap();
        (params, v, t)
    }

    fn random_pixels(n: usize, cfg: &ModelConfig) -> Tensor {
        Tensor::rand(
            0f32,
            1f32,
            (n, 3, cfg.image_height, cfg.image_width),
            &Device::Cpu,
        )
        .unwrap()
    }

    #[test]
    fn patch_count_follows_image_and_patch_size() {
        let full = ModelConfig::default();
        assert_eq!(full.num_patches(), 192);
        assert_eq!(full.visual_seq_len(), 194);
        assert_eq!(ModelConfig::desk().num_patches(), 32);
    }

    #[test]
    fn visual_sequence_has_patches_plus_two_class_tokens() -> Result<()> {
        let cfg = desk(10);
        let (_, v, _) = build(&cfg);
        let f = v.encode_pixels(&random_pixels(3, &cfg))?;
        assert_eq!(f.sequence.dims(), &[3, 34, 64]);
        assert_eq!(f.patch_tokens.dims(), &[3, 32, 64]);
        assert_eq!(f.cls_t2i.dims(), &[3, 64]);
        Ok(())
    }

    #[test]
    fn single_token_mode_shares_the_class_embedding() -> Result<()> {
        let cfg = ModelConfig {
            dual_class_tokens: false,
            ..desk(10)
        };
        let (_, v, _) = build(&cfg);
        let f = v.encode_pixels(&random_pixels(2, &cfg))?;
        assert_eq!(f.sequence.dim(1)?, 33);
        let diff = (&f.cls_t2i - &f.cls_i2i)?
            .abs()?
            .sum_all()?
            .to_scalar::<f32>()?;
        assert_eq!(diff, 0.0);
        Ok(())
    }

    #[test]
    fn zero_projection_gives_zero_class_embeddings() -> Result<()> {
        let cfg = desk(10);
        let (params, _, _) = build(&cfg);
        params.assign(
            "visual.proj.weight",
            &Tensor::zeros((64, 64), DType::F32, &Device::Cpu)?,
        )?;
        let all: crate::params::GroupSet = crate::params::ParamGroup::ALL.into_iter().collect();
        let v = VisionEncoder::new(&ParamBuilder::bind(&params, &all).pp("visual"), &cfg)?;
        let f = v.encode_pixels(&random_pixels(2, &cfg))?;
        assert_eq!(f.cls_t2i.abs()?.sum_all()?.to_scalar::<f32>()?, 0.0);
        assert_eq!(f.cls_i2i.abs()?.sum_all()?.to_scalar::<f32>()?, 0.0);
        Ok(())
    }

    #[test]
    fn mismatched_image_size_is_a_configuration_error() {
        let cfg = desk(10);
        let (_, v, _) = build(&cfg);
        let px = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(v.encode_pixels(&px), Err(Error::Config(_))));
    }

    #[test]
    fn image_encoding_is_deterministic() -> Result<()> {
        let cfg = desk(10);
        let (_, v, _) = build(&cfg);
        let px = random_pixels(2, &cfg);
        let a = v
            .encode_pixels(&px)?
            .sequence
            .flatten_all()?
            .to_vec1::<f32>()?;
        let b = v
            .encode_pixels(&px)?
            .sequence
            .flatten_all()?
            .to_vec1::<f32>()?;
        assert_eq!(a, b);
        Ok(())
    }

    #[test]
    fn text_requires_eos_and_length_limit() {
        let cfg = desk(10);
        let (_, _, t) = build(&cfg);
        assert!(matches!(
            t.encode_text(&[vec![BOS_ID, 5, 6]]),
            Err(Error::Input(_))
        ));
        let long: Vec<u32> = std::iter::once(BOS_ID)
            .chain(std::iter::repeat(5).take(80))
            .chain(std::iter::once(EOS_ID))
            .collect();
        assert!(matches!(t.encode_text(&[long]), Err(Error::Input(_))));
        let max: Vec<u32> = std::iter::once(BOS_ID)
            .chain(std::iter::repeat(5).take(75))
            .chain(std::iter::once(EOS_ID))
            .collect();
        assert_eq!(max.len(), 77);
        assert!(t.encode_text(&[max]).is_ok());
    }

    #[test]
    fn identical_captions_give_identical_embeddings_and_batches_permute() -> Result<()> {
        let cfg = desk(10);
        let (_, _, t) = build(&cfg);
        let a = vec![BOS_ID, 4, 5, 6, EOS_ID];
        let b = vec![BOS_ID, 7, 3, EOS_ID];
        let f = t.encode_text(&[a.clone(), a.clone(), b.clone()])?;
        let rows = f.eos.to_vec2::<f32>()?;
        assert_eq!(rows[0], rows[1]);
        let g = t.encode_text(&[b, a])?.eos.to_vec2::<f32>()?;
        for (x, y) in g[0].iter().zip(&rows[2]) {
            assert!((x - y).abs() < 1e-6);
        }
        for (x, y) in g[1].iter().zip(&rows[0]) {
            assert!((x - y).abs() < 1e-6);
        }
        Ok(())
    }

    #[test]
    fn eos_embedding_is_projection_of_eos_token_state() -> Result<()> {
        let cfg = desk(10);
        let (params, _, t) = build(&cfg);
        let f = t.encode_text(&[vec![BOS_ID, 4, 5, EOS_ID]])?;
        let state = f.token_features.get(0)?.get(3)?;
        let w = params.var("text.proj.weight").unwrap();
        let expected = w.as_tensor().matmul(&state.unsqueeze(1)?)?.squeeze(1)?;
        let diff = (expected - f.eos.get(0)?)?
            .abs()?
            .max_all()?
            .to_scalar::<f32>()?;
        assert!(diff < 1e-6);
        Ok(())
    }

    #[test]
    fn cosine_sim_basic_cases() -> Result<()> {
        let dev = Device::Cpu;
        let a = Tensor::new(&[1.0f64, 2.0, -1.0], &dev)?;
        let s = cosine_sim(&a, &a)?.to_scalar::<f64>()?;
        assert!((s - 1.0).abs() < 1e-12);
        let neg = cosine_sim(&a, &a.neg()?)?.to_scalar::<f64>()?;
        assert!((neg + 1.0).abs() < 1e-12);
        let e1 = Tensor::new(&[1.0f64, 0.0], &dev)?;
        let e2 = Tensor::new(&[0.0f64, 1.0], &dev)?;
        assert_eq!(cosine_sim(&e1, &e2)?.to_scalar::<f64>()?, 0.0);
        let zero = Tensor::new(&[0.0f64, 0.0], &dev)?;
        assert!(matches!(cosine_sim(&e1, &zero), Err(Error::Numeric { .. })));
        Ok(())
    }

    #[test]
    fn cosine_matrix_is_symmetric() -> Result<()> {
        let a = Tensor::randn(0.0f64, 1.0, (5, 8), &Device::Cpu)?;
        let b = Tensor::randn(0.0f64, 1.0, (4, 8), &Device::Cpu)?;
        let ab = cosine_sim(&a, &b)?.to_vec2::<f64>()?;
        let ba = cosine_sim(&b, &a)?.to_vec2::<f64>()?;
        for i in 0..5 {
            for j in 0..4 {
                assert!((ab[i][j] - ba[j][i]).abs() < 1e-7);
                assert!(ab[i][j].abs() <= 1.0);
            }
        }
        Ok(())
    }
}
