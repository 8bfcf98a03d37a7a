use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DiffusionError, DiffusionModel};
use crate::query::TokenSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Examples per forward/backward pass; gradients are accumulated over
    /// the batch so the update equals that of one full-batch pass.
    pub micro_batch: usize,
    pub steps: usize,
    pub p_uncond: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            batch_size: 64,
            micro_batch: 4,
            steps: 30_000,
            p_uncond: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        if !(0.0..1.0).contains(&self.p_uncond) {
            return Err(DiffusionError::Config(format!("p_uncond {} outside [0, 1)", self.p_uncond)));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.micro_batch == 0 {
            return Err(DiffusionError::Config("learning rate, batch size and micro-batch must be positive".into()));
        }
        Ok(())
    }
}

/// The random choices behind one loss evaluation, drawn up front so the
/// same loss can be re-evaluated exactly.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub timesteps: Vec<usize>,
    pub eps: Tensor,
    /// `true` where the condition is replaced by the null query.
    pub drop_condition: Vec<bool>,
}

impl NoiseDraw {
    pub fn sample(
        rng: &mut impl Rng,
        model: &DiffusionModel,
        batch: usize,
        p_uncond: f64,
    ) -> Result<Self, DiffusionError> {
        let t_max = model.schedule().len();
        let timesteps = (0..batch).map(|_| rng.random_range(1..=t_max)).collect();
        let drop_condition = (0..batch).map(|_| rng.random::<f64>() < p_uncond).collect();
        let s = model.config().image_size;
        let shape = (batch, model.config().unet.in_channels, s, s);
        let n = batch * model.config().unet.in_channels * s * s;
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let eps = Tensor::from_vec(v, shape, model.device())?.to_dtype(model.dtype())?;
        Ok(Self { timesteps, eps, drop_condition })
    }
}

/// Squared error between the drawn noise and the model's prediction, averaged per example: `(B,)`.
pub fn per_example_loss(
    model: &DiffusionModel,
    z0: &Tensor,
    seqs: &[TokenSequence],
    draw: &NoiseDraw,
) -> Result<Tensor, DiffusionError> {
    if seqs.len() != draw.timesteps.len() || seqs.len() != draw.drop_condition.len() {
        return Err(DiffusionError::Shape("batch, sequences and noise draw disagree in size".into()));
    }
    let effective: Vec<TokenSequence> = seqs
        .iter()
        .zip(&draw.drop_condition)
        .map(|(s, &drop)| if drop { model.null_sequence().clone() } else { s.clone() })
        .collect();
    let zt = model.schedule().q_sample_batch(z0, &draw.timesteps, &draw.eps)?;
    let t: Vec<f64> = draw.timesteps.iter().map(|&t| t as f64).collect();
    let pred = model.eps(&zt, &t, &effective)?;
    let b = seqs.len();
    Ok((pred - &draw.eps)?.sqr()?.reshape((b, ()))?.mean(D::Minus1)?)
}

pub fn training_loss(
    model: &DiffusionModel,
    z0: &Tensor,
    seqs: &[TokenSequence],
    draw: &NoiseDraw,
) -> Result<Tensor, DiffusionError> {
    Ok(per_example_loss(model, z0, seqs, draw)?.mean_all()?)
}

/// AdamW over every model parameter, including both embedding tables.
pub struct Trainer<'a> {
    model: &'a DiffusionModel,
    opt: AdamW,
    rng: ChaCha8Rng,
    cfg: TrainConfig,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a DiffusionModel, cfg: TrainConfig) -> Result<Self, DiffusionError> {
        cfg.validate()?;
        let params = ParamsAdamW {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
        };
        let opt = AdamW::new(model.var_map().all_vars(), params)?;
        Ok(Self { model, opt, rng: ChaCha8Rng::seed_from_u64(cfg.seed), cfg, step: 0 })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Stream for batch assembly, separate from the noise stream.
    pub fn data_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0xDA7A_5EED)
    }

    /// One optimizer step; returns the batch loss.
    pub fn step(&mut self, z0: &Tensor, seqs: &[TokenSequence]) -> Result<f64, DiffusionError> {
        let b = seqs.len();
        let draw = NoiseDraw::sample(&mut self.rng, self.model, b, self.cfg.p_uncond)?;
        let mut total: Option<GradStore> = None;
        let mut value = 0.0;
        for start in (0..b).step_by(self.cfg.micro_batch) {
            let n = self.cfg.micro_batch.min(b - start);
            let part = NoiseDraw {
                timesteps: draw.timesteps[start..start + n].to_vec(),
                eps: draw.eps.narrow(0, start, n)?,
                drop_condition: draw.drop_condition[start..start + n].to_vec(),
            };
            let loss = (per_example_loss(self.model, &z0.narrow(0, start, n)?, &seqs[start..start + n], &part)?.sum_all()?
                / b as f64)?;
            value += loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            let grads = loss.backward()?;
            total = Some(match total {
                None => grads,
                Some(mut acc) => {
                    for v in self.model.var_map().all_vars() {
                        if let Some(g) = grads.get(v.as_tensor()) {
                            let sum = match acc.get(v.as_tensor()) {
                                Some(a) => (a + g)?,
                                None => g.clone(),
                            };
                            acc.insert(v.as_tensor(), sum);
                        }
                    }
                    acc
                }
            });
        }
        if !value.is_finite() {
            return Err(DiffusionError::NonFinite {
                step: self.step,
                detail: format!("loss {value} at timesteps {:?}", draw.timesteps),
            });
        }
        if let Some(g) = total {
            self.opt.step(&g)?;
        }
        self.step += 1;
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ModelConfig;
    use crate::query::Query;
    use crate::scenegen::{generate_scene, render, scene_lexicon_vocab, SceneConfig};
    use candle_core::Device;

    fn tiny(dtype: DType, seed: u64) -> DiffusionModel {
        let cfg = ModelConfig::tiny();
        DiffusionModel::new(cfg.clone(), scene_lexicon_vocab(&cfg.quantizer), dtype, &Device::Cpu, seed).unwrap()
    }

    #[test]
    fn duplicate_examples_have_identical_losses() {
        let m = tiny(DType::F64, 1);
        let img = render(&generate_scene(3, &SceneConfig { height: 16, width: 16, min_side_px: 4, max_side_px: 8, ..Default::default() }).unwrap());
        let z0 = m.images_to_latents(&[img.clone(), img]).unwrap();
        let seq = m.encode(&Query::caption_only("a red square").unwrap()).unwrap();
        let one = NoiseDraw::sample(&mut ChaCha8Rng::seed_from_u64(0), &m, 1, 0.0).unwrap();
        let draw = NoiseDraw {
            timesteps: vec![one.timesteps[0]; 2],
            eps: Tensor::cat(&[&one.eps, &one.eps], 0).unwrap(),
            drop_condition: vec![false; 2],
        };
        let l: Vec<f64> = per_example_loss(&m, &z0, &[seq.clone(), seq], &draw).unwrap().to_vec1().unwrap();
        assert_eq!(l[0], l[1]);
    }

    #[test]
    fn p_uncond_is_validated() {
        assert!(TrainConfig { p_uncond: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { p_uncond: -0.1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
