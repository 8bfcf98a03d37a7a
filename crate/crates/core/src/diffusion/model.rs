use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use super::attention::{AttentionRecord, StepAttention};
use super::encoder::SequenceEncoder;
use super::init::SeededVarMap;
use super::sampler::{cfg_eps, sample_from, seeded_normal, EpsModel, SamplerConfig};
use super::unet::{Capture, UNet, UNetConfig};
use super::{DiffusionError, NoiseSchedule, ScheduleConfig};
use crate::coords::QuantizerConfig;
use crate::query::{encode_query, ids_tensor, mask_tensor, EmbeddingInit, EmbeddingTable, Query, TokenSequence, Vocabulary};
use crate::scenegen::RasterImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub quantizer: QuantizerConfig,
    pub max_len: usize,
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub position_init: EmbeddingInit,
    pub unet: UNetConfig,
    /// Side of the square canvas.
    pub image_size: usize,
    pub schedule: ScheduleConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            quantizer: QuantizerConfig::default(),
            max_len: crate::query::DEFAULT_MAX_LEN,
            embed_dim: 128,
            encoder_layers: 2,
            encoder_heads: 4,
            position_init: EmbeddingInit::Gaussian,
            unet: UNetConfig::default(),
            image_size: 64,
            schedule: ScheduleConfig::default(),
        }
    }
}

impl ModelConfig {
    /// A few-thousand-parameter model for tests and smoke runs.
    pub fn tiny() -> Self {
        Self {
            quantizer: QuantizerConfig::default(),
            max_len: 32,
            embed_dim: 16,
            encoder_layers: 1,
            encoder_heads: 2,
            position_init: EmbeddingInit::Gaussian,
            unet: UNetConfig { in_channels: 3, channels: [8, 16], attn_heads: 2, norm_groups: 4, context_dim: 16 },
            image_size: 16,
            schedule: ScheduleConfig { steps: 100, ..Default::default() },
        }
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        if self.unet.context_dim != self.embed_dim {
            return Err(DiffusionError::Config(format!(
                "U-Net context width {} != embedding width {}",
                self.unet.context_dim, self.embed_dim
            )));
        }
        if self.image_size < 4 || self.image_size % 2 != 0 {
            return Err(DiffusionError::Config(format!("image size {} must be even and >= 4", self.image_size)));
        }
        if self.max_len < 2 {
            return Err(DiffusionError::Config("max_len must hold at least BOS and EOS".into()));
        }
        Ok(())
    }
}

/// Maps images into the space the denoiser works in and back.
pub trait Autoencoder: Send + Sync {
    fn encode(&self, x: &Tensor) -> candle_core::Result<Tensor>;
    fn decode(&self, z: &Tensor) -> candle_core::Result<Tensor>;
}

/// Pixel-space diffusion: latents are the images themselves.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityAutoencoder;

impl Autoencoder for IdentityAutoencoder {
    fn encode(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        Ok(x.clone())
    }
    fn decode(&self, z: &Tensor) -> candle_core::Result<Tensor> {
        Ok(z.clone())
    }
}

/// Output of a single guided sampling run.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: RasterImage,
    pub attention: AttentionRecord,
    pub sequence: TokenSequence,
}

/// Embedding tables, sequence encoder and U-Net trained jointly.
pub struct DiffusionModel {
    vars: SeededVarMap,
    vocab: Vocabulary,
    config: ModelConfig,
    schedule: NoiseSchedule,
    embed: EmbeddingTable,
    encoder: SequenceEncoder,
    unet: UNet,
    autoencoder: Box<dyn Autoencoder>,
    null_seq: TokenSequence,
    device: Device,
    dtype: DType,
}

impl DiffusionModel {
    pub fn new(config: ModelConfig, vocab: Vocabulary, dtype: DType, device: &Device, seed: u64) -> Result<Self, DiffusionError> {
        config.validate()?;
        if vocab.n_bins() != config.quantizer.n_bins() {
            return Err(DiffusionError::Config(format!(
                "vocabulary has {} position bins, quantizer {}",
                vocab.n_bins(),
                config.quantizer.n_bins()
            )));
        }
        Self::from_parts(SeededVarMap::new(seed), config, vocab, dtype, device)
    }

    pub fn with_autoencoder(mut self, ae: Box<dyn Autoencoder>) -> Self {
        self.autoencoder = ae;
        self
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn var_map(&self) -> &candle_nn::VarMap {
        &self.vars.map
    }

    pub fn parameter_count(&self) -> usize {
        self.vars.map.all_vars().iter().map(|v| v.elem_count()).sum()
    }

    pub fn embeddings(&self) -> &EmbeddingTable {
        &self.embed
    }

    pub fn encode(&self, q: &Query) -> Result<TokenSequence, DiffusionError> {
        Ok(encode_query(q, &self.vocab, &self.config.quantizer, self.config.max_len)?)
    }

    pub fn null_sequence(&self) -> &TokenSequence {
        &self.null_seq
    }

    /// Conditioning embeddings `(B, L, D)` and key mask `(B, L)`.
    pub fn condition(&self, seqs: &[TokenSequence]) -> Result<(Tensor, Tensor), DiffusionError> {
        if let Some(s) = seqs.iter().find(|s| s.max_len() != self.config.max_len) {
            return Err(DiffusionError::Shape(format!("sequence length {} != model max_len {}", s.max_len(), self.config.max_len)));
        }
        let ids = ids_tensor(seqs, &self.vocab, &self.device)?;
        let mask = mask_tensor(seqs, self.dtype, &self.device)?;
        let x = self.embed.embed_ids(&ids)?;
        Ok((self.encoder.forward(&x, &mask)?, mask))
    }

    /// Noise prediction for latents `(B, C, H, W)` at per-example timesteps.
    pub fn forward(
        &self,
        z: &Tensor,
        t: &[f64],
        cond: &Tensor,
        mask: &Tensor,
        capture: Option<&mut Capture>,
    ) -> Result<Tensor, DiffusionError> {
        let t = Tensor::from_vec(t.to_vec(), t.len(), &self.device)?.to_dtype(self.dtype)?;
        Ok(self.unet.forward(z, &t, cond, mask, capture)?)
    }

    pub fn eps(&self, z: &Tensor, t: &[f64], seqs: &[TokenSequence]) -> Result<Tensor, DiffusionError> {
        let (cond, mask) = self.condition(seqs)?;
        self.forward(z, t, &cond, &mask, None)
    }

    /// Images to latents `(B, 3, H, W)`.
    pub fn images_to_latents(&self, imgs: &[RasterImage]) -> Result<Tensor, DiffusionError> {
        let s = self.config.image_size;
        let mut flat = Vec::with_capacity(imgs.len() * 3 * s * s);
        for img in imgs {
            if img.height() != s || img.width() != s {
                return Err(DiffusionError::Shape(format!("image {}x{} but model expects {s}x{s}", img.height(), img.width())));
            }
            flat.extend(img.to_chw());
        }
        let x = Tensor::from_vec(flat, (imgs.len(), 3, s, s), &self.device)?.to_dtype(self.dtype)?;
        Ok(self.autoencoder.encode(&x)?)
    }

    /// Latents back to images, clamped to `[0, 1]`.
    pub fn latents_to_images(&self, z: &Tensor) -> Result<Vec<RasterImage>, DiffusionError> {
        let x = self.autoencoder.decode(z)?.clamp(0.0, 1.0)?.to_dtype(DType::F32)?;
        let (b, _, h, w) = x.dims4()?;
        (0..b)
            .map(|i| {
                let v: Vec<f32> = x.get(i)?.flatten_all()?.to_vec1()?;
                Ok(RasterImage::from_chw(h, w, &v))
            })
            .collect()
    }

    fn latent_shape(&self, batch: usize) -> (usize, usize, usize, usize) {
        let s = self.config.image_size;
        (batch, self.config.unet.in_channels, s, s)
    }

    /// One image per query; item `i` starts from the noise seeded by `seeds[i]`.
    pub fn sample_batch(&self, queries: &[Query], seeds: &[u64], cfg: &SamplerConfig) -> Result<Vec<RasterImage>, DiffusionError> {
        if queries.len() != seeds.len() {
            return Err(DiffusionError::Shape(format!("{} queries but {} seeds", queries.len(), seeds.len())));
        }
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let seqs = queries.iter().map(|q| self.encode(q)).collect::<Result<Vec<_>, _>>()?;
        let unconditional = queries.iter().all(Query::is_null);
        let mut guided = Guided::new(self, &seqs, cfg.guidance_scale, unconditional, None)?;
        let z = self.initial_noise(seeds)?;
        let z = sample_from(&mut guided, z, &self.schedule, cfg)?;
        self.latents_to_images(&z)
    }

    /// A single sample with its cross-attention record when enabled.
    pub fn sample(&self, query: &Query, cfg: &SamplerConfig) -> Result<Sample, DiffusionError> {
        let seq = self.encode(query)?;
        let keys = if cfg.record_attention { Some(seq.unpadded_len()) } else { None };
        let mut guided = Guided::new(self, std::slice::from_ref(&seq), cfg.guidance_scale, query.is_null(), keys)?;
        let z = self.initial_noise(&[cfg.seed])?;
        let z = sample_from(&mut guided, z, &self.schedule, cfg)?;
        let tokens = seq.tokens()[..seq.unpadded_len()].iter().map(|t| self.vocab.render(t)).collect();
        let attention = AttentionRecord { steps: guided.steps, tokens };
        let image = self.latents_to_images(&z)?.remove(0);
        Ok(Sample { image, attention, sequence: seq })
    }

    fn initial_noise(&self, seeds: &[u64]) -> Result<Tensor, DiffusionError> {
        let parts = seeds
            .iter()
            .map(|&s| seeded_normal(self.latent_shape(1), s, self.dtype, &self.device))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    }

    /// Embedding rows of the position table, for inspection.
    pub fn position_embedding_norms(&self) -> Result<Vec<f64>, DiffusionError> {
        let n = self.embed.position.sqr()?.sum(D::Minus1)?.sqrt()?.to_dtype(DType::F64)?;
        Ok(n.to_vec1()?)
    }

    pub(crate) fn from_parts(
        vars: SeededVarMap,
        config: ModelConfig,
        vocab: Vocabulary,
        dtype: DType,
        device: &Device,
    ) -> Result<Self, DiffusionError> {
        let schedule = NoiseSchedule::new(&config.schedule)?;
        let vb = vars.builder(dtype, device);
        let embed = EmbeddingTable::new(vb.pp("embed"), &vocab, config.max_len, config.embed_dim, config.position_init)?;
        let encoder = SequenceEncoder::new(vb.pp("encoder"), config.embed_dim, config.encoder_layers, config.encoder_heads)?;
        let unet = UNet::new(vb.pp("unet"), &config.unet)?;
        let null_seq = encode_query(&Query::null(), &vocab, &config.quantizer, config.max_len)?;
        Ok(Self {
            vars,
            vocab,
            config,
            schedule,
            embed,
            encoder,
            unet,
            autoencoder: Box::new(IdentityAutoencoder),
            null_seq,
            device: device.clone(),
            dtype,
        })
    }
}

enum GuideMode {
    Single,
    Guided { scale: f64, batch: usize },
}

/// Applies classifier-free guidance around the model and records attention.
struct Guided<'a> {
    model: &'a DiffusionModel,
    cond: Tensor,
    mask: Tensor,
    mode: GuideMode,
    capture_keys: Option<usize>,
    steps: Vec<StepAttention>,
}

impl<'a> Guided<'a> {
    fn new(
        model: &'a DiffusionModel,
        seqs: &[TokenSequence],
        scale: f64,
        unconditional: bool,
        capture_keys: Option<usize>,
    ) -> Result<Self, DiffusionError> {
        let b = seqs.len();
        let (all, mode) = if unconditional {
            (vec![model.null_seq.clone(); b], GuideMode::Single)
        } else if scale == 1.0 {
            (seqs.to_vec(), GuideMode::Single)
        } else {
            let mut v = vec![model.null_seq.clone(); b];
            v.extend_from_slice(seqs);
            (v, GuideMode::Guided { scale, batch: b })
        };
        let (cond, mask) = model.condition(&all)?;
        Ok(Self { model, cond: cond.detach(), mask, mode, capture_keys, steps: Vec::new() })
    }
}

impl EpsModel for Guided<'_> {
    fn eps(&mut self, z: &Tensor, t: f64, first_of_step: bool) -> Result<Tensor, DiffusionError> {
        let (input, index) = match self.mode {
            GuideMode::Single => (z.clone(), 0),
            GuideMode::Guided { batch, .. } => (Tensor::cat(&[z, z], 0)?, batch),
        };
        let n = input.dim(0)?;
        let mut capture = match self.capture_keys {
            Some(k) if first_of_step => Some(Capture::new(index, k)),
            _ => None,
        };
        let out = self.model.forward(&input, &vec![t; n], &self.cond, &self.mask, capture.as_mut())?.detach();
        if let Some(c) = capture {
            self.steps.push(StepAttention { t, blocks: c.blocks });
        }
        match self.mode {
            GuideMode::Single => Ok(out),
            GuideMode::Guided { scale, batch } => cfg_eps(&out.narrow(0, 0, batch)?, &out.narrow(0, batch, batch)?, scale),
        }
    }
}
