use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::DiffusionError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
    /// Built from an explicit `alpha_bar` table.
    Custom,
}

/// Constants that reproduce a schedule; stored in checkpoints and run manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 1e-4, beta_end: 0.02, kind: ScheduleKind::Linear }
    }
}

/// Discrete forward-noising timeline. Timesteps run `1..=T`; `alpha_bar(0) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
    config: ScheduleConfig,
}

pub fn make_schedule(t: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule, DiffusionError> {
    NoiseSchedule::new(&ScheduleConfig { steps: t, beta_start, beta_end, kind: ScheduleKind::Linear })
}

impl NoiseSchedule {
    pub fn new(cfg: &ScheduleConfig) -> Result<Self, DiffusionError> {
        if cfg.kind != ScheduleKind::Linear {
            return Err(DiffusionError::Config("only linear schedules can be built from beta constants".into()));
        }
        if cfg.steps == 0 {
            return Err(DiffusionError::Config("schedule needs at least one step".into()));
        }
        if !(cfg.beta_start > 0.0 && cfg.beta_start <= cfg.beta_end && cfg.beta_end < 1.0) {
            return Err(DiffusionError::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {} and {}",
                cfg.beta_start, cfg.beta_end
            )));
        }
        let n = cfg.steps;
        let betas: Vec<f64> = (0..n)
            .map(|i| {
                if n == 1 {
                    cfg.beta_start
                } else {
                    cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (n - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(n);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { betas, alpha_bar, config: cfg.clone() })
    }

    /// Schedule from `alpha_bar_1..=alpha_bar_T`, strictly decreasing inside `(0, 1)`.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self, DiffusionError> {
        if alpha_bar.is_empty() {
            return Err(DiffusionError::Config("empty alpha_bar table".into()));
        }
        let mut prev = 1.0;
        let mut betas = Vec::with_capacity(alpha_bar.len());
        for (i, &a) in alpha_bar.iter().enumerate() {
            if !(a > 0.0 && a < prev) {
                return Err(DiffusionError::Config(format!("alpha_bar not strictly decreasing in (0,1) at t={}", i + 1)));
            }
            betas.push(1.0 - a / prev);
            prev = a;
        }
        let config = ScheduleConfig {
            steps: alpha_bar.len(),
            beta_start: betas[0],
            beta_end: *betas.last().unwrap(),
            kind: ScheduleKind::Custom,
        };
        Ok(Self { betas, alpha_bar, config })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `alpha_bar_t` for integer `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// `alpha_bar` at a fractional timestep, log-linear between neighbours.
    pub fn alpha_bar_at(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, self.len() as f64);
        let lo = t.floor() as usize;
        let frac = t - lo as f64;
        if frac == 0.0 {
            return self.alpha_bar(lo);
        }
        let (a, b) = (self.alpha_bar(lo).ln(), self.alpha_bar(lo + 1).ln());
        (a + (b - a) * frac).exp()
    }

    /// `z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`.
    pub fn q_sample(&self, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor, DiffusionError> {
        if t == 0 || t > self.len() {
            return Err(DiffusionError::Config(format!("timestep {t} outside 1..={}", self.len())));
        }
        if z0.shape() != eps.shape() {
            return Err(DiffusionError::Shape(format!("z0 {:?} vs eps {:?}", z0.shape(), eps.shape())));
        }
        let ab = self.alpha_bar(t);
        Ok((z0.affine(ab.sqrt(), 0.0)? + eps.affine((1.0 - ab).sqrt(), 0.0)?)?)
    }

    /// Batched `q_sample` with one timestep per leading-axis element.
    pub fn q_sample_batch(&self, z0: &Tensor, ts: &[usize], eps: &Tensor) -> Result<Tensor, DiffusionError> {
        if z0.shape() != eps.shape() {
            return Err(DiffusionError::Shape(format!("z0 {:?} vs eps {:?}", z0.shape(), eps.shape())));
        }
        if z0.dim(0)? != ts.len() {
            return Err(DiffusionError::Shape(format!("{} timesteps for batch of {}", ts.len(), z0.dim(0)?)));
        }
        if let Some(&bad) = ts.iter().find(|&&t| t == 0 || t > self.len()) {
            return Err(DiffusionError::Config(format!("timestep {bad} outside 1..={}", self.len())));
        }
        let mut shape = vec![ts.len()];
        shape.extend(std::iter::repeat_n(1, z0.rank() - 1));
        let col = |f: &dyn Fn(f64) -> f64| -> candle_core::Result<Tensor> {
            let v: Vec<f64> = ts.iter().map(|&t| f(self.alpha_bar(t))).collect();
            Tensor::from_vec(v, shape.as_slice(), z0.device())?.to_dtype(z0.dtype())
        };
        let a = col(&|ab| ab.sqrt())?;
        let s = col(&|ab| (1.0 - ab).sqrt())?;
        Ok((z0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn default_schedule_ends_near_zero_and_decreases() {
        let s = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        let mut log_prod = 0.0;
        for i in 0..1000 {
            log_prod += (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln();
        }
        assert!((s.alpha_bar(1000) - log_prod.exp()).abs() < 1e-12);
        assert!(s.alpha_bar(1000) < 1e-4);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.betas()[t - 1] > 0.0 && s.betas()[t - 1] < 1.0);
        }
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.03, 0.02).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
    }

    #[test]
    fn from_alpha_bar_roundtrips_betas() {
        let s = make_schedule(50, 1e-3, 0.05).unwrap();
        let r = NoiseSchedule::from_alpha_bar((1..=50).map(|t| s.alpha_bar(t)).collect()).unwrap();
        for (a, b) in s.betas().iter().zip(r.betas()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(NoiseSchedule::from_alpha_bar(vec![0.9, 0.95]).is_err());
    }

    #[test]
    fn q_sample_limits() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let dev = Device::Cpu;
        let z0 = Tensor::randn(0f64, 1.0, (2, 3), &dev).unwrap();
        let zero = z0.zeros_like().unwrap();
        let ab = s.alpha_bar(40);
        let a: Vec<f64> = s.q_sample(&z0, 40, &zero).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f64> = z0.flatten_all().unwrap().to_vec1().unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - ab.sqrt() * y).abs() < 1e-15);
        }
        let c: Vec<f64> = s.q_sample(&zero, 40, &z0).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for (x, y) in c.iter().zip(&b) {
            assert!((x - (1.0 - ab).sqrt() * y).abs() < 1e-15);
        }
        assert!(s.q_sample(&z0, 0, &z0).is_err());
        assert!(s.q_sample(&z0, 5, &Tensor::zeros((3, 2), candle_core::DType::F64, &dev).unwrap()).is_err());
    }
}
