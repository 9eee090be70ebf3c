//! Transformer building blocks written against candle primitives so that every
//! operation has a backward pass.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{Error, Result};
use crate::params::{Init, ParamBuilder};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(b: &ParamBuilder, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let std = (1.0 / in_dim as f64).sqrt();
        let weight = b.get("weight", (out_dim, in_dim), Init::TruncNormal(std))?;
        let bias = if bias {
            Some(b.get_no_decay("bias", out_dim, Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// Wraps an existing `[out, in]` weight (and optional `[out]` bias).
    pub fn from_weight(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    /// Applies the map over the last dimension of a tensor of any rank ≥ 1.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims
            .last()
            .ok_or_else(|| Error::Input("linear on a scalar".into()))?;
        let rows = x.elem_count() / in_dim.max(1);
        let flat = x.reshape((rows, in_dim))?;
        let mut y = flat.matmul(&self.weight.t()?)?;
        if let Some(bias) = &self.bias {
            y = y.broadcast_add(bias)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().expect("nonempty") = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new(b: &ParamBuilder, dim: usize) -> Result<Self> {
        Self::with_gain(b, dim, 1.0)
    }

    /// Like `new` with the gain initialized to `gain` instead of one.
    pub fn with_gain(b: &ParamBuilder, dim: usize, gain: f64) -> Result<Self> {
        Ok(Self {
            weight: b.get_no_decay("weight", dim, Init::Const(gain))?,
            bias: b.get_no_decay("bias", dim, Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)?)
    }
}

/// Numerically stable log-softmax over the last dimension.
pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Additive attention mask: 0 where attention is allowed, a large negative value elsewhere.
#[derive(Clone, Debug)]
pub struct AttentionMask(Tensor);

impl AttentionMask {
    /// Lower-triangular mask shared across the batch, shape `[1, 1, L, L]`.
    pub fn causal(len: usize, dtype: DType, device: &Device) -> Result<Self> {
        let data: Vec<f32> = (0..len)
            .flat_map(|i| (0..len).map(move |j| if j <= i { 0.0 } else { f32::NEG_INFINITY }))
            .collect();
        let t = Tensor::from_vec(data, (1, 1, len, len), device)?.to_dtype(dtype)?;
        Ok(Self(t))
    }

    /// Per-sample key mask, shape `[B, 1, 1, L]`; `valid[b][j]` says key `j` may be attended.
    pub fn keys(valid: &[Vec<bool>], dtype: DType, device: &Device) -> Result<Self> {
        let batch = valid.len();
        let len = valid.first().map_or(0, Vec::len);
        let data: Vec<f32> = valid
            .iter()
            .flat_map(|row| row.iter().map(|&v| if v { 0.0 } else { f32::NEG_INFINITY }))
            .collect();
        let t = Tensor::from_vec(data, (batch, 1, 1, len), device)?.to_dtype(dtype)?;
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(b: &ParamBuilder, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "width {width} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            qkv: Linear::new(&b.pp("qkv"), width, 3 * width, true)?,
            out: Linear::new(&b.pp("out"), width, width, true)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&AttentionMask>) -> Result<Tensor> {
        let (batch, len, width) = x.dims3()?;
        let head_dim = width / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((batch, len, 3, self.heads, head_dim))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        if let Some(mask) = mask {
            scores = scores.broadcast_add(mask.tensor())?;
        }
        let attn = softmax(&scores)?;
        let ctx = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((batch, len, width))?;
        self.out.forward(&ctx)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    pub fn new(b: &ParamBuilder, width: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&b.pp("ln1"), width)?,
            attn: MultiHeadAttention::new(&b.pp("attn"), width, heads)?,
            ln2: LayerNorm::new(&b.pp("ln2"), width)?,
            fc1: Linear::new(&b.pp("fc1"), width, 4 * width, true)?,
            fc2: Linear::new(&b.pp("fc2"), 4 * width, width, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&AttentionMask>) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?, mask)?)?;
        let h = self
            .fc2
            .forward(&self.fc1.forward(&self.ln2.forward(&x)?)?.gelu()?)?;
        Ok((x + h)?)
    }
}

#[derive(Clone, Debug)]
pub struct Transformer {
    blocks: Vec<Block>,
}

impl Transformer {
    pub fn new(b: &ParamBuilder, width: usize, layers: usize, heads: usize) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| Block::new(&b.pp(i), width, heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Runs all blocks, checking activations for NaN/Inf after each one.
    pub fn forward(
        &self,
        x: &Tensor,
        mask: Option<&AttentionMask>,
        location: &str,
    ) -> Result<Tensor> {
        let mut x = x.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x, mask)?;
            ensure_finite(&x, &format!("{location} layer {i}"))?;
        }
        Ok(x)
    }
}

/// Errors with the given location if any element is NaN or infinite.
pub fn ensure_finite(x: &Tensor, location: &str) -> Result<()> {
    // NaN propagates through a sum, whereas max may skip it.
    let total = x
        .abs()?
        .sum_all()?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?;
    if total.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(
            location,
            format!("non-finite activation (sum |x| = {total})"),
        ))
    }
}
