//! Small building blocks written against plain tensor ops so every piece
//! has a backward pass in any float dtype.

use candle_core::{Module, Result, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig, Linear, VarBuilder};

pub fn linear(vb: VarBuilder, inp: usize, out: usize) -> Result<Linear> {
    candle_nn::linear(inp, out, vb)
}

pub fn conv3x3(vb: VarBuilder, inp: usize, out: usize, stride: usize) -> Result<Conv2d> {
    candle_nn::conv2d(inp, out, 3, Conv2dConfig { padding: 1, stride, ..Default::default() }, vb)
}

pub fn conv1x1(vb: VarBuilder, inp: usize, out: usize) -> Result<Conv2d> {
    candle_nn::conv2d(inp, out, 1, Conv2dConfig::default(), vb)
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new(vb: VarBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: vb.get_with_hints(dim, "weight", candle_nn::Init::Const(1.0))?,
            bias: vb.get_with_hints(dim, "bias", candle_nn::Init::Const(0.0))?,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
}

impl GroupNorm {
    pub fn new(vb: VarBuilder, channels: usize, groups: usize) -> Result<Self> {
        if channels % groups != 0 {
            candle_core::bail!("group norm: {channels} channels not divisible by {groups} groups")
        }
        Ok(Self {
            weight: vb.get_with_hints(channels, "weight", candle_nn::Init::Const(1.0))?,
            bias: vb.get_with_hints(channels, "bias", candle_nn::Init::Const(0.0))?,
            groups,
        })
    }
}

impl Module for GroupNorm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?.reshape((b, c, h, w))?;
        let shape = (1, c, 1, 1);
        normed
            .broadcast_mul(&self.weight.reshape(shape)?)?
            .broadcast_add(&self.bias.reshape(shape)?)
    }
}

/// Softmax over the last axis; entries where `bias` is large and negative get zero weight.
pub fn masked_softmax(scores: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let scores = match bias {
        Some(b) => scores.broadcast_add(b)?,
        None => scores.clone(),
    };
    let max = scores.max_keepdim(D::Minus1)?.detach();
    let e = scores.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

/// `(B, L)` 0/1 key mask to an additive `(B, 1, 1, L)` bias.
pub fn mask_bias(mask: &Tensor) -> Result<Tensor> {
    let (b, l) = mask.dims2()?;
    ((mask - 1.0)? * 1e9)?.reshape((b, 1, 1, l))
}

/// Multi-head attention core. `q`: `(B, N, C)`, `k`/`v`: `(B, L, C)`.
/// Returns the mixed values `(B, N, C)` and weights `(B, heads, N, L)`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, bias: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
    let (b, n, c) = q.dims3()?;
    let l = k.dim(1)?;
    let dh = c / heads;
    let split = |t: &Tensor, len: usize| t.reshape((b, len, heads, dh))?.transpose(1, 2)?.contiguous();
    let (q, k, v) = (split(q, n)?, split(k, l)?, split(v, l)?);
    let scores = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?;
    let weights = masked_softmax(&scores, bias)?;
    let out = weights.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, n, c))?;
    Ok((out, weights))
}

/// Sinusoidal features of (possibly fractional) timesteps, `(B,) -> (B, dim)`.
pub fn timestep_features(t: &Tensor, dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let dtype = t.dtype();
    let freqs: Vec<f64> = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp()).collect();
    let freqs = Tensor::from_vec(freqs, (1, half), t.device())?.to_dtype(dtype)?;
    let args = t.to_dtype(dtype)?.unsqueeze(1)?.broadcast_mul(&freqs)?;
    Tensor::cat(&[args.sin()?, args.cos()?], 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn masked_softmax_rows_sum_to_one_and_skip_masked() {
        let dev = Device::Cpu;
        let scores = Tensor::randn(0f64, 3.0, (2, 1, 4, 5), &dev).unwrap();
        let mask = Tensor::new(&[[1f64, 1., 1., 0., 0.], [1., 0., 1., 1., 1.]], &dev).unwrap();
        let w = masked_softmax(&scores, Some(&mask_bias(&mask).unwrap())).unwrap();
        let flat: Vec<f64> = w.flatten_all().unwrap().to_vec1().unwrap();
        for (i, row) in flat.chunks(5).enumerate() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            if i < 4 {
                assert_eq!((row[3], row[4]), (0.0, 0.0));
            } else {
                assert_eq!(row[1], 0.0);
            }
        }
    }

    #[test]
    fn group_norm_normalizes_groups() {
        let dev = Device::Cpu;
        let vm = candle_nn::VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F64, &dev);
        let gn = GroupNorm::new(vb, 4, 2).unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, 4, 3, 3), &dev).unwrap().affine(5.0, 2.0).unwrap();
        let y = gn.forward(&x).unwrap().reshape((2, 18)).unwrap();
        let means: Vec<f64> = y.mean(1).unwrap().to_vec1().unwrap();
        assert!(means.iter().all(|m| m.abs() < 1e-10));
    }
}
