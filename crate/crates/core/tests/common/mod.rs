//! Fixtures and numeric checks shared by the diffusion tests and the acceptance harness.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use layoutdiff_core::diffusion::{
    sample_from, seeded_normal, training_loss, DiffusionError, DiffusionModel, ModelConfig, NoiseDraw, NoiseSchedule,
    SamplerConfig, ScheduleConfig,
};
use layoutdiff_core::query::{Token, TokenSequence};
use layoutdiff_core::scenegen::{
    generate_scene, render, scene_lexicon_vocab, scene_to_query, AreaTerciles, PositionWordRules, QueryMode, SceneConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny(dtype: DType, seed: u64) -> DiffusionModel {
    let cfg = ModelConfig::tiny();
    DiffusionModel::new(cfg.clone(), scene_lexicon_vocab(&cfg.quantizer), dtype, &Device::Cpu, seed).unwrap()
}

pub fn small_scenes() -> SceneConfig {
    SceneConfig { height: 16, width: 16, max_shapes: 2, min_side_px: 4, max_side_px: 8, ..Default::default() }
}

pub fn rules() -> PositionWordRules {
    PositionWordRules::new(AreaTerciles { small_max: 0.08, medium_max: 0.15 })
}

pub fn batch(m: &DiffusionModel, n: usize, seed: u64) -> (Tensor, Vec<TokenSequence>) {
    let cfg = small_scenes();
    let mut imgs = Vec::new();
    let mut seqs = Vec::new();
    for i in 0..n as u64 {
        let s = generate_scene(seed * 1000 + i, &cfg).unwrap();
        imgs.push(render(&s));
        seqs.push(m.encode(&scene_to_query(&s, QueryMode::PositionTokens, &rules())).unwrap());
    }
    (m.images_to_latents(&imgs).unwrap(), seqs)
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn var(m: &DiffusionModel, name: &str) -> Var {
    m.var_map().data().lock().unwrap().get(name).unwrap_or_else(|| panic!("no variable {name}")).clone()
}

pub fn set_entry(v: &Var, idx: usize, value: f64) {
    let mut flat: Vec<f64> = v.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
    flat[idx] = value;
    v.set(&Tensor::from_vec(flat, v.shape(), v.device()).unwrap()).unwrap();
}

pub fn entry(t: &Tensor, idx: usize) -> f64 {
    t.flatten_all().unwrap().get(idx).unwrap().to_scalar::<f64>().unwrap()
}

/// Below this, autograd and the difference quotient are both round-off.
pub const NEGLIGIBLE: f64 = 1e-10;

/// Compares autograd against Richardson-extrapolated central differences on
/// `probes` counted parameters per batch. Returns the worst relative error.
pub fn finite_difference_check(batches: u64, probes: usize, tol: f64) -> Result<f64, String> {
    let m = tiny(DType::F64, 11);
    let mut names: Vec<String> = m.var_map().data().lock().unwrap().keys().cloned().collect();
    names.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for b in 0..batches {
        let (z0, seqs) = batch(&m, 4, b + 1);
        let p_uncond = if b == batches - 1 { 0.5 } else { 0.0 };
        let draw = NoiseDraw::sample(&mut rng, &m, 4, p_uncond).unwrap();
        let loss = |m: &DiffusionModel| scalar(&training_loss(m, &z0, &seqs, &draw).unwrap());
        let grads = training_loss(&m, &z0, &seqs, &draw).unwrap().backward().unwrap();

        // Rows referenced by a kept condition, so both embedding tables are probed.
        let kept = &seqs[draw.drop_condition.iter().position(|d| !d).expect("some condition kept")];
        let pos_row = kept
            .tokens()
            .iter()
            .find_map(|t| match t {
                Token::Position(bin) => Some(bin.index()),
                _ => None,
            })
            .unwrap();
        let text_row = kept
            .tokens()
            .iter()
            .find_map(|t| match t {
                Token::Text(i) => Some(*i as usize),
                _ => None,
            })
            .unwrap();
        let dim = m.config().embed_dim;
        let mut forced: Vec<(String, usize, bool)> = vec![
            ("embed.position".into(), pos_row * dim + rng.random_range(0..dim), true),
            ("embed.text".into(), text_row * dim + rng.random_range(0..dim), true),
        ];
        let mut counted = 0;
        while counted < probes {
            let (name, idx, in_use) = match forced.pop() {
                Some(p) => p,
                None => {
                    let name = names[rng.random_range(0..names.len())].clone();
                    let n = var(&m, &name).elem_count();
                    (name, rng.random_range(0..n), false)
                }
            };
            let v = var(&m, &name);
            let g = entry(grads.get(v.as_tensor()).ok_or(format!("{name} has no gradient"))?, idx);
            let x0 = entry(v.as_tensor(), idx);
            let central = |h: f64| {
                set_entry(&v, idx, x0 + h);
                let up = loss(&m);
                set_entry(&v, idx, x0 - h);
                let down = loss(&m);
                set_entry(&v, idx, x0);
                (up - down) / (2.0 * h)
            };
            let h = 1e-3;
            let fd = (4.0 * central(h / 2.0) - central(h)) / 3.0;
            if in_use && g == 0.0 {
                return Err(format!("{name}[{idx}] is in use but has zero gradient"));
            }
            // Structurally zero gradients (e.g. key biases under softmax shift
            // invariance) leave only round-off in the difference quotient.
            if g.abs().max(fd.abs()) < NEGLIGIBLE {
                continue;
            }
            let rel = (g - fd).abs() / g.abs().max(fd.abs());
            if rel > tol {
                return Err(format!("{name}[{idx}]: autograd {g:e} vs fd {fd:e} (rel {rel:e})"));
            }
            worst = worst.max(rel);
            counted += 1;
        }
    }
    Ok(worst)
}

/// Loss of a network whose output layer is zero, with its standard error.
pub fn zero_network_loss() -> (f64, f64) {
    let m = tiny(DType::F64, 2);
    for name in ["unet.conv_out.weight", "unet.conv_out.bias"] {
        let v = var(&m, name);
        v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
    }
    let (z0, seqs) = batch(&m, 32, 9);
    let draw = NoiseDraw::sample(&mut ChaCha8Rng::seed_from_u64(1), &m, 32, 0.1).unwrap();
    let loss = scalar(&training_loss(&m, &z0, &seqs, &draw).unwrap());
    let sq: Vec<f64> = draw.eps.sqr().unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let n = sq.len() as f64;
    let mean = sq.iter().sum::<f64>() / n;
    let var = sq.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (loss, (var / n).sqrt())
}

/// `(t, sample variance, 1 - alpha_bar_t, standard error)` for q_sample of a zero image.
pub fn q_sample_variances() -> Vec<(usize, f64, f64, f64)> {
    let sched = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
    let dev = Device::Cpu;
    let n = 10_000;
    [1usize, 250, 500, 1000]
        .into_iter()
        .map(|t| {
            let z0 = Tensor::zeros(n, DType::F64, &dev).unwrap();
            let eps = seeded_normal(n, t as u64, DType::F64, &dev).unwrap();
            let z: Vec<f64> = sched.q_sample(&z0, t, &eps).unwrap().to_vec1().unwrap();
            let mean = z.iter().sum::<f64>() / n as f64;
            let var = z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let expect = 1.0 - sched.alpha_bar(t);
            (t, var, expect, expect * (2.0 / (n - 1) as f64).sqrt())
        })
        .collect()
}

/// Linear test problem with a closed-form probability-flow solution.
///
/// Data is `N(0, SIGMA0^2)` and `z_t = sqrt(ab) (x0 + sigma eps)` with
/// `ab = 1 / (1 + sigma^2)` and `sigma` linear in `t`. The exact noise
/// prediction is `sigma x / (SIGMA0^2 + sigma^2)` with `x = z / sqrt(ab)`, so the
/// ODE `dx/dsigma = eps` carries `x_T` to `x_T SIGMA0 / sqrt(SIGMA0^2 + SIGMA_MAX^2)`.
pub const PLMS_T: usize = 1600;
pub const SIGMA_MAX: f64 = 2.0;
pub const SIGMA0: f64 = 1.0;
pub const X_T: f64 = 3.0;

/// Absolute PLMS error on the linear problem for each step count.
pub fn plms_errors(step_counts: &[usize]) -> Vec<f64> {
    let table: Vec<f64> = (1..=PLMS_T)
        .map(|t| {
            let s = SIGMA_MAX * t as f64 / PLMS_T as f64;
            1.0 / (1.0 + s * s)
        })
        .collect();
    let sched = NoiseSchedule::from_alpha_bar(table).unwrap();
    let exact = X_T * SIGMA0 / (SIGMA0 * SIGMA0 + SIGMA_MAX * SIGMA_MAX).sqrt();
    step_counts
        .iter()
        .map(|&steps| {
            let mut eps = |z: &Tensor, t: f64| -> Result<Tensor, DiffusionError> {
                let a = sched.alpha_bar_at(t);
                let s = ((1.0 - a) / a).sqrt();
                Ok(z.affine(s / a.sqrt() / (SIGMA0 * SIGMA0 + s * s), 0.0)?)
            };
            let z_t = Tensor::new(&[X_T * sched.alpha_bar(PLMS_T).sqrt()], &Device::Cpu).unwrap();
            let cfg = SamplerConfig { steps, guidance_scale: 1.0, ..Default::default() };
            let z0: Vec<f64> = sample_from(&mut eps, z_t, &sched, &cfg).unwrap().to_vec1().unwrap();
            (z0[0] - exact).abs()
        })
        .collect()
}

/// Observed orders `log2(e_n / e_2n)` for successive doublings.
pub fn observed_orders(errors: &[f64]) -> Vec<f64> {
    errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}
