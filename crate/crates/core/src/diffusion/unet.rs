//! Two-resolution U-Net noise predictor with cross-attention to the
//! conditioning sequence at every resolution.

use candle_core::{Module, Result, Tensor};
use candle_nn::{Conv2d, Linear, VarBuilder};
use serde::{Deserialize, Serialize};

use super::attention::BlockAttention;
use super::layers::{attention, conv1x1, conv3x3, linear, mask_bias, timestep_features, GroupNorm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Channel width at full and half resolution.
    pub channels: [usize; 2],
    pub attn_heads: usize,
    pub norm_groups: usize,
    pub context_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { in_channels: 3, channels: [64, 128], attn_heads: 4, norm_groups: 8, context_dim: 128 }
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(vb: VarBuilder, inp: usize, out: usize, temb_dim: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(vb.pp("norm1"), inp, groups)?,
            conv1: conv3x3(vb.pp("conv1"), inp, out, 1)?,
            temb: linear(vb.pp("temb"), temb_dim, out)?,
            norm2: GroupNorm::new(vb.pp("norm2"), out, groups)?,
            conv2: conv3x3(vb.pp("conv2"), out, out, 1)?,
            skip: if inp == out { None } else { Some(conv1x1(vb.pp("skip"), inp, out)?) },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.temb.forward(temb)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        skip + h
    }
}

#[derive(Debug, Clone)]
struct CrossAttention {
    norm: GroupNorm,
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    out: Linear,
    heads: usize,
    name: &'static str,
}

impl CrossAttention {
    fn new(vb: VarBuilder, channels: usize, context_dim: usize, heads: usize, groups: usize, name: &'static str) -> Result<Self> {
        if channels % heads != 0 {
            candle_core::bail!("cross-attention width {channels} not divisible by {heads} heads")
        }
        Ok(Self {
            norm: GroupNorm::new(vb.pp("norm"), channels, groups)?,
            to_q: linear(vb.pp("to_q"), channels, channels)?,
            to_k: linear(vb.pp("to_k"), context_dim, channels)?,
            to_v: linear(vb.pp("to_v"), context_dim, channels)?,
            out: linear(vb.pp("out"), channels, channels)?,
            heads,
            name,
        })
    }

    fn forward(&self, x: &Tensor, ctx: &Ctx, capture: &mut Option<&mut Capture>) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let tokens = self.norm.forward(x)?.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        let q = self.to_q.forward(&tokens)?;
        let k = self.to_k.forward(&ctx.cond)?;
        let v = self.to_v.forward(&ctx.cond)?;
        let (mixed, weights) = attention(&q, &k, &v, self.heads, Some(&ctx.bias))?;
        if let Some(cap) = capture.as_deref_mut() {
            cap.record(self.name, h, w, &weights)?;
        }
        let out = self.out.forward(&mixed)?.transpose(1, 2)?.reshape((b, c, h, w))?;
        x + out
    }
}

struct Ctx {
    cond: Tensor,
    bias: Tensor,
}

/// Collects head-averaged cross-attention weights for one batch element.
#[derive(Debug)]
pub struct Capture {
    pub batch_index: usize,
    /// Number of leading (non-padding) keys to keep.
    pub n_keys: usize,
    pub blocks: Vec<BlockAttention>,
}

impl Capture {
    pub fn new(batch_index: usize, n_keys: usize) -> Self {
        Self { batch_index, n_keys, blocks: Vec::new() }
    }

    fn record(&mut self, name: &str, height: usize, width: usize, weights: &Tensor) -> Result<()> {
        let w = weights.get(self.batch_index)?.mean(0)?.narrow(1, 0, self.n_keys)?;
        let data: Vec<f32> = w.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1()?;
        self.blocks.push(BlockAttention { name: name.to_string(), height, width, n_keys: self.n_keys, weights: data });
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    conv_in: Conv2d,
    temb1: Linear,
    temb2: Linear,
    down0: ResBlock,
    attn_d0: CrossAttention,
    downsample: Conv2d,
    down1: ResBlock,
    attn_d1: CrossAttention,
    mid: ResBlock,
    attn_mid: CrossAttention,
    up1: ResBlock,
    attn_u1: CrossAttention,
    upconv: Conv2d,
    up0: ResBlock,
    attn_u0: CrossAttention,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    cfg: UNetConfig,
}

impl UNet {
    pub fn new(vb: VarBuilder, cfg: &UNetConfig) -> Result<Self> {
        let [c0, c1] = cfg.channels;
        let td = 4 * c0;
        let g = cfg.norm_groups;
        let (ctx, heads) = (cfg.context_dim, cfg.attn_heads);
        Ok(Self {
            conv_in: conv3x3(vb.pp("conv_in"), cfg.in_channels, c0, 1)?,
            temb1: linear(vb.pp("temb1"), c0, td)?,
            temb2: linear(vb.pp("temb2"), td, td)?,
            down0: ResBlock::new(vb.pp("down0"), c0, c0, td, g)?,
            attn_d0: CrossAttention::new(vb.pp("attn_d0"), c0, ctx, heads, g, "down0")?,
            downsample: conv3x3(vb.pp("downsample"), c0, c0, 2)?,
            down1: ResBlock::new(vb.pp("down1"), c0, c1, td, g)?,
            attn_d1: CrossAttention::new(vb.pp("attn_d1"), c1, ctx, heads, g, "down1")?,
            mid: ResBlock::new(vb.pp("mid"), c1, c1, td, g)?,
            attn_mid: CrossAttention::new(vb.pp("attn_mid"), c1, ctx, heads, g, "mid")?,
            up1: ResBlock::new(vb.pp("up1"), 2 * c1, c1, td, g)?,
            attn_u1: CrossAttention::new(vb.pp("attn_u1"), c1, ctx, heads, g, "up1")?,
            upconv: conv3x3(vb.pp("upconv"), c1, c1, 1)?,
            up0: ResBlock::new(vb.pp("up0"), c1 + c0, c0, td, g)?,
            attn_u0: CrossAttention::new(vb.pp("attn_u0"), c0, ctx, heads, g, "up0")?,
            norm_out: GroupNorm::new(vb.pp("norm_out"), c0, g)?,
            conv_out: conv3x3(vb.pp("conv_out"), c0, cfg.in_channels, 1)?,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    /// `x`: `(B, C, H, W)`, `t`: `(B,)` timesteps, `cond`: `(B, L, D)`, `mask`: `(B, L)`.
    pub fn forward(
        &self,
        x: &Tensor,
        t: &Tensor,
        cond: &Tensor,
        mask: &Tensor,
        mut capture: Option<&mut Capture>,
    ) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            candle_core::bail!("spatial size {h}x{w} must be even")
        }
        let ctx = Ctx { cond: cond.clone(), bias: mask_bias(mask)? };
        let temb = timestep_features(t, self.cfg.channels[0])?;
        let temb = self.temb2.forward(&self.temb1.forward(&temb)?.silu()?)?;

        let h0 = self.conv_in.forward(x)?;
        let s0 = self.down0.forward(&h0, &temb)?;
        let s0 = self.attn_d0.forward(&s0, &ctx, &mut capture)?;
        let d = self.downsample.forward(&s0)?;
        let s1 = self.down1.forward(&d, &temb)?;
        let s1 = self.attn_d1.forward(&s1, &ctx, &mut capture)?;

        let m = self.mid.forward(&s1, &temb)?;
        let m = self.attn_mid.forward(&m, &ctx, &mut capture)?;

        let u1 = self.up1.forward(&Tensor::cat(&[&m, &s1], 1)?, &temb)?;
        let u1 = self.attn_u1.forward(&u1, &ctx, &mut capture)?;
        let u = self.upconv.forward(&u1.upsample_nearest2d(h, w)?)?;
        let u0 = self.up0.forward(&Tensor::cat(&[&u, &s0], 1)?, &temb)?;
        let u0 = self.attn_u0.forward(&u0, &ctx, &mut capture)?;

        self.conv_out.forward(&self.norm_out.forward(&u0)?.silu()?)
    }
}
