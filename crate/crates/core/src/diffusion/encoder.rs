//! Transformer encoder turning token embeddings into the conditioning sequence.

use candle_core::{Module, Result, Tensor};
use candle_nn::{Linear, VarBuilder};

use super::layers::{attention, linear, mask_bias, LayerNorm};

#[derive(Debug, Clone)]
struct SelfAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    fn new(vb: VarBuilder, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self { qkv: linear(vb.pp("qkv"), dim, 3 * dim)?, out: linear(vb.pp("out"), dim, dim)?, heads })
    }

    fn forward(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let dim = x.dim(2)?;
        let qkv = self.qkv.forward(x)?;
        let q = qkv.narrow(2, 0, dim)?;
        let k = qkv.narrow(2, dim, dim)?;
        let v = qkv.narrow(2, 2 * dim, dim)?;
        let (mixed, _) = attention(&q, &k, &v, self.heads, Some(bias))?;
        self.out.forward(&mixed)
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    norm1: LayerNorm,
    attn: SelfAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl EncoderLayer {
    fn new(vb: VarBuilder, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(vb.pp("norm1"), dim)?,
            attn: SelfAttention::new(vb.pp("attn"), dim, heads)?,
            norm2: LayerNorm::new(vb.pp("norm2"), dim)?,
            fc1: linear(vb.pp("fc1"), dim, 4 * dim)?,
            fc2: linear(vb.pp("fc2"), 4 * dim, dim)?,
        })
    }

    fn forward(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?, bias)?)?;
        let h = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.gelu()?)?;
        x + h
    }
}

/// Pre-norm transformer; padding keys are masked out of self-attention.
#[derive(Debug, Clone)]
pub struct SequenceEncoder {
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
}

impl SequenceEncoder {
    pub fn new(vb: VarBuilder, dim: usize, n_layers: usize, heads: usize) -> Result<Self> {
        if dim % heads != 0 {
            candle_core::bail!("encoder width {dim} not divisible by {heads} heads")
        }
        let layers = (0..n_layers)
            .map(|i| EncoderLayer::new(vb.pp(format!("layer{i}")), dim, heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, final_norm: LayerNorm::new(vb.pp("final_norm"), dim)? })
    }

    /// `(B, L, D)` embeddings and `(B, L)` key mask to `(B, L, D)` conditioning.
    pub fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let bias = mask_bias(mask)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h, &bias)?;
        }
        self.final_norm.forward(&h)
    }
}
