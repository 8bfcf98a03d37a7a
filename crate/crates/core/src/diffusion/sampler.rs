//! Deterministic DDIM transfer, classifier-free guidance and the
//! pseudo-linear-multistep sampler built on top of them.

use candle_core::{DType, Device, Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DiffusionError, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ddim,
    #[default]
    Plms,
}

/// How PLMS obtains the noise history before four predictions exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PlmsWarmup {
    /// Pseudo Runge-Kutta steps, four evaluations each.
    #[default]
    PseudoRungeKutta,
    /// Plain DDIM steps.
    Ddim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    pub guidance_scale: f64,
    pub eta: f64,
    pub seed: u64,
    pub warmup: PlmsWarmup,
    pub record_attention: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Plms,
            steps: 50,
            guidance_scale: 4.0,
            eta: 0.0,
            seed: 0,
            warmup: PlmsWarmup::PseudoRungeKutta,
            record_attention: true,
        }
    }
}

impl SamplerConfig {
    /// Checks the config against a schedule and returns the timestep stride.
    pub fn validate(&self, schedule_len: usize) -> Result<usize, DiffusionError> {
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(DiffusionError::Config(format!("guidance scale {} must be finite and >= 0", self.guidance_scale)));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(DiffusionError::Config(format!("eta {} must be finite and >= 0", self.eta)));
        }
        if self.kind == SamplerKind::Plms && self.steps < 4 {
            return Err(DiffusionError::Config(format!("PLMS needs at least 4 steps, got {}", self.steps)));
        }
        if self.steps == 0 || schedule_len % self.steps != 0 {
            return Err(DiffusionError::Config(format!(
                "{} sampler steps do not divide the {schedule_len}-step schedule",
                self.steps
            )));
        }
        Ok(schedule_len / self.steps)
    }
}

/// Descending timesteps `steps*stride, ..., stride`; each step moves to `t - stride`.
pub fn timesteps(steps: usize, stride: usize) -> Vec<usize> {
    (1..=steps).rev().map(|i| i * stride).collect()
}

pub fn cfg_eps(eps_uncond: &Tensor, eps_cond: &Tensor, s: f64) -> Result<Tensor, DiffusionError> {
    if eps_uncond.shape() != eps_cond.shape() {
        return Err(DiffusionError::Shape(format!("{:?} vs {:?}", eps_uncond.shape(), eps_cond.shape())));
    }
    if s == 1.0 {
        return Ok(eps_cond.clone());
    }
    if s == 0.0 {
        return Ok(eps_uncond.clone());
    }
    Ok((eps_uncond + (eps_cond - eps_uncond)?.affine(s, 0.0)?)?)
}

/// One DDIM transfer from `t` to `t_prev`. `noise` is required when `eta > 0`.
pub fn ddim_step(
    z_t: &Tensor,
    t: f64,
    t_prev: f64,
    eps_hat: &Tensor,
    sched: &NoiseSchedule,
    eta: f64,
    noise: Option<&Tensor>,
) -> Result<Tensor, DiffusionError> {
    if t_prev > t || t_prev < 0.0 {
        return Err(DiffusionError::Config(format!("invalid transfer {t} -> {t_prev}")));
    }
    if z_t.shape() != eps_hat.shape() {
        return Err(DiffusionError::Shape(format!("{:?} vs {:?}", z_t.shape(), eps_hat.shape())));
    }
    if t_prev == t {
        return Ok(z_t.clone());
    }
    let a_t = sched.alpha_bar_at(t);
    let a_prev = sched.alpha_bar_at(t_prev);
    let sigma = eta * ((1.0 - a_prev) / (1.0 - a_t)).sqrt() * (1.0 - a_t / a_prev).sqrt();
    let x0 = (z_t - eps_hat.affine((1.0 - a_t).sqrt(), 0.0)?)?.affine(1.0 / a_t.sqrt(), 0.0)?;
    let dir = (1.0 - a_prev - sigma * sigma).max(0.0).sqrt();
    let mut out = (x0.affine(a_prev.sqrt(), 0.0)? + eps_hat.affine(dir, 0.0)?)?;
    if sigma > 0.0 {
        let n = noise.ok_or_else(|| DiffusionError::Config("eta > 0 needs a noise tensor".into()))?;
        out = (out + n.affine(sigma, 0.0)?)?;
    }
    Ok(out)
}

/// Standard-normal tensor from a seeded stream, independent of the tensor backend.
pub fn seeded_normal(shape: impl Into<Shape>, seed: u64, dtype: DType, device: &Device) -> Result<Tensor, DiffusionError> {
    let shape = shape.into();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..shape.elem_count()).map(|_| StandardNormal.sample(&mut rng)).collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

/// Noise predictor seen by the samplers. `first_of_step` marks the first
/// evaluation of every sampler step, where attention may be recorded.
pub trait EpsModel {
    fn eps(&mut self, z: &Tensor, t: f64, first_of_step: bool) -> Result<Tensor, DiffusionError>;
}

impl<F> EpsModel for F
where
    F: FnMut(&Tensor, f64) -> Result<Tensor, DiffusionError>,
{
    fn eps(&mut self, z: &Tensor, t: f64, _first_of_step: bool) -> Result<Tensor, DiffusionError> {
        self(z, t)
    }
}

fn ab4(e: [&Tensor; 4]) -> Result<Tensor, DiffusionError> {
    let s = ((e[0].affine(55.0, 0.0)? - e[1].affine(59.0, 0.0)?)? + (e[2].affine(37.0, 0.0)? - e[3].affine(9.0, 0.0)?)?)?;
    Ok(s.affine(1.0 / 24.0, 0.0)?)
}

/// Runs the configured sampler from `z_init` to timestep 0. No clamping.
pub fn sample_from(
    model: &mut dyn EpsModel,
    z_init: Tensor,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Tensor, DiffusionError> {
    let stride = cfg.validate(sched.len())?;
    let mut z = z_init;
    match cfg.kind {
        SamplerKind::Ddim => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_D1D1);
            for t in timesteps(cfg.steps, stride) {
                let (tf, tp) = (t as f64, (t - stride) as f64);
                let e = model.eps(&z, tf, true)?;
                let noise = if cfg.eta > 0.0 {
                    let v: Vec<f64> = (0..z.elem_count()).map(|_| StandardNormal.sample(&mut rng)).collect();
                    Some(Tensor::from_vec(v, z.shape(), z.device())?.to_dtype(z.dtype())?)
                } else {
                    None
                };
                z = ddim_step(&z, tf, tp, &e, sched, cfg.eta, noise.as_ref())?;
            }
        }
        SamplerKind::Plms => {
            let mut history: Vec<Tensor> = Vec::with_capacity(4);
            for t in timesteps(cfg.steps, stride) {
                let (tf, tp) = (t as f64, (t - stride) as f64);
                let e1 = model.eps(&z, tf, true)?;
                let e_prime = if history.len() < 3 {
                    match cfg.warmup {
                        PlmsWarmup::PseudoRungeKutta => {
                            let mid = tf - stride as f64 / 2.0;
                            let x1 = ddim_step(&z, tf, mid, &e1, sched, 0.0, None)?;
                            let e2 = model.eps(&x1, mid, false)?;
                            let x2 = ddim_step(&z, tf, mid, &e2, sched, 0.0, None)?;
                            let e3 = model.eps(&x2, mid, false)?;
                            let x3 = ddim_step(&z, tf, tp, &e3, sched, 0.0, None)?;
                            let e4 = model.eps(&x3, tp, false)?;
                            let s = (((&e1 + e2.affine(2.0, 0.0)?)? + e3.affine(2.0, 0.0)?)? + e4)?;
                            s.affine(1.0 / 6.0, 0.0)?
                        }
                        PlmsWarmup::Ddim => e1.clone(),
                    }
                } else {
                    let n = history.len();
                    ab4([&e1, &history[n - 1], &history[n - 2], &history[n - 3]])?
                };
                history.push(e1);
                if history.len() > 3 {
                    history.remove(0);
                }
                z = ddim_step(&z, tf, tp, &e_prime, sched, 0.0, None)?;
            }
        }
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;

    fn vals(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
    }

    #[test]
    fn cfg_identities_and_linearity() {
        let dev = Device::Cpu;
        let u = Tensor::randn(0f64, 1.0, (2, 3), &dev).unwrap();
        let c = Tensor::randn(0f64, 1.0, (2, 3), &dev).unwrap();
        assert_eq!(vals(&cfg_eps(&u, &c, 1.0).unwrap()), vals(&c));
        assert_eq!(vals(&cfg_eps(&u, &c, 0.0).unwrap()), vals(&u));
        let z = u.zeros_like().unwrap();
        let four: Vec<f64> = vals(&c).iter().map(|v| 4.0 * v).collect();
        assert_eq!(vals(&cfg_eps(&z, &c, 4.0).unwrap()), four);
        // three points on the line s -> cfg(s) are collinear
        let (a, b, m) = (vals(&cfg_eps(&u, &c, 0.5).unwrap()), vals(&cfg_eps(&u, &c, 2.5).unwrap()), vals(&cfg_eps(&u, &c, 1.5).unwrap()));
        for i in 0..a.len() {
            assert!(((a[i] + b[i]) / 2.0 - m[i]).abs() < 1e-12);
        }
        assert!(cfg_eps(&u, &Tensor::zeros((3, 2), DType::F64, &dev).unwrap(), 2.0).is_err());
    }

    #[test]
    fn ddim_identity_and_exact_eps_recovery() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let dev = Device::Cpu;
        let z0 = Tensor::randn(0f64, 1.0, (1, 3, 4, 4), &dev).unwrap();
        let e0 = Tensor::randn(0f64, 1.0, (1, 3, 4, 4), &dev).unwrap();
        let zt = s.q_sample(&z0, 1000, &e0).unwrap();
        assert_eq!(vals(&ddim_step(&zt, 500.0, 500.0, &e0, &s, 0.0, None).unwrap()), vals(&zt));

        let mut exact = |z: &Tensor, t: f64| -> Result<Tensor, DiffusionError> {
            let a = s.alpha_bar_at(t);
            Ok((z - z0.affine(a.sqrt(), 0.0)?)?.affine(1.0 / (1.0 - a).sqrt(), 0.0)?)
        };
        let cfg = SamplerConfig { kind: SamplerKind::Ddim, steps: 1000, ..Default::default() };
        let out = sample_from(&mut exact, zt, &s, &cfg).unwrap();
        for (a, b) in vals(&out).iter().zip(vals(&z0)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn samplers_are_deterministic() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let dev = Device::Cpu;
        let run = |kind, eta| {
            let mut f = |z: &Tensor, t: f64| -> Result<Tensor, DiffusionError> { Ok((z.sin()? * (t / 100.0))?) };
            let cfg = SamplerConfig { kind, steps: 10, eta, seed: 3, ..Default::default() };
            let z = seeded_normal((1, 3, 4, 4), 11, DType::F32, &dev).unwrap();
            vals(&sample_from(&mut f, z, &s, &cfg).unwrap())
        };
        assert_eq!(run(SamplerKind::Plms, 0.0), run(SamplerKind::Plms, 0.0));
        assert_eq!(run(SamplerKind::Ddim, 0.5), run(SamplerKind::Ddim, 0.5));
    }

    #[test]
    fn config_validation() {
        let cfg = SamplerConfig { steps: 3, ..Default::default() };
        assert!(cfg.validate(1000).is_err());
        assert!(SamplerConfig { steps: 30, ..Default::default() }.validate(1000).is_err());
        assert_eq!(SamplerConfig::default().validate(1000).unwrap(), 20);
        assert!(SamplerConfig { guidance_scale: -1.0, ..Default::default() }.validate(1000).is_err());
    }

    #[test]
    fn plms_warmup_counts_evaluations() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let dev = Device::Cpu;
        for (warmup, expected) in [(PlmsWarmup::PseudoRungeKutta, 3 * 4 + 7), (PlmsWarmup::Ddim, 10)] {
            let mut calls = 0usize;
            let mut f = |z: &Tensor, _t: f64| -> Result<Tensor, DiffusionError> {
                calls += 1;
                Ok(z.affine(0.1, 0.0)?)
            };
            let cfg = SamplerConfig { steps: 10, warmup, ..Default::default() };
            sample_from(&mut f, Tensor::ones((1, 2), DType::F64, &dev).unwrap(), &s, &cfg).unwrap();
            assert_eq!(calls, expected);
        }
    }
}
