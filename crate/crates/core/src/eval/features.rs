//! Small CNN over fixed-size crops. Its penultimate layer supplies the
//! features for toy-FID and toy-SceneFID.

use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{AdamW, Conv2d, Conv2dConfig, Linear, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::coords::NormalizedBox;
use crate::diffusion::SeededVarMap;
use crate::scenegen::{generate_scene, render, ObjectLabel, RasterImage, SceneConfig};

pub const CROP_SIZE: usize = 32;
pub const FEATURE_DIM: usize = 64;
/// Every object label plus a trailing "none" class.
pub const N_CLASSES: usize = ObjectLabel::COUNT + 1;

pub fn class_index(label: Option<ObjectLabel>) -> usize {
    label.map_or(ObjectLabel::COUNT, |l| l.index())
}

pub fn class_label(index: usize) -> Option<ObjectLabel> {
    ObjectLabel::from_index(index)
}

/// Crop to `b` and resize bilinearly to the classifier input size.
pub fn prepare_crop(img: &RasterImage, b: &NormalizedBox) -> RasterImage {
    img.crop(b).resize_bilinear(CROP_SIZE, CROP_SIZE)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self { steps: 400, batch_size: 64, learning_rate: 2e-3, seed: 0 }
    }
}

pub struct CropClassifier {
    vars: SeededVarMap,
    convs: Vec<Conv2d>,
    fc1: Linear,
    fc2: Linear,
    device: Device,
}

impl CropClassifier {
    pub fn new(seed: u64, device: &Device) -> Result<Self, EvalError> {
        let vars = SeededVarMap::new(seed);
        let vb = vars.builder(DType::F32, device);
        let widths = [(3, 16, 2), (16, 32, 2), (32, 32, 2)];
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &(a, b, s))| {
                candle_nn::conv2d(a, b, 3, Conv2dConfig { padding: 1, stride: s, ..Default::default() }, vb.pp(format!("conv{i}")))
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        let side = CROP_SIZE / 8;
        let fc1 = candle_nn::linear(32 * side * side, FEATURE_DIM, vb.pp("fc1"))?;
        let fc2 = candle_nn::linear(FEATURE_DIM, N_CLASSES, vb.pp("fc2"))?;
        Ok(Self { vars, convs, fc1, fc2, device: device.clone() })
    }

    /// `(B, 3, S, S)` crops to `(features (B, 64), logits (B, classes))`.
    fn forward(&self, x: &Tensor) -> candle_core::Result<(Tensor, Tensor)> {
        let mut h = x.clone();
        for c in &self.convs {
            h = c.forward(&h)?.relu()?;
        }
        let feats = self.fc1.forward(&h.flatten_from(1)?)?.relu()?;
        let logits = self.fc2.forward(&feats)?;
        Ok((feats, logits))
    }

    fn batch_tensor(&self, crops: &[RasterImage]) -> Result<Tensor, EvalError> {
        let mut flat = Vec::with_capacity(crops.len() * 3 * CROP_SIZE * CROP_SIZE);
        for c in crops {
            if c.height() != CROP_SIZE || c.width() != CROP_SIZE {
                return Err(EvalError::Dimension(format!("crop {}x{} (expected {CROP_SIZE})", c.height(), c.width())));
            }
            flat.extend(c.to_chw());
        }
        Ok(Tensor::from_vec(flat, (crops.len(), 3, CROP_SIZE, CROP_SIZE), &self.device)?)
    }

    fn run(&self, crops: &[RasterImage]) -> Result<(Vec<Vec<f64>>, Vec<usize>), EvalError> {
        let mut feats = Vec::with_capacity(crops.len());
        let mut preds = Vec::with_capacity(crops.len());
        for chunk in crops.chunks(256) {
            let (f, l) = self.forward(&self.batch_tensor(chunk)?)?;
            let f: Vec<Vec<f32>> = f.to_vec2()?;
            feats.extend(f.into_iter().map(|r| r.into_iter().map(f64::from).collect::<Vec<_>>()));
            preds.extend(l.argmax(D::Minus1)?.to_vec1::<u32>()?.into_iter().map(|v| v as usize));
        }
        Ok((feats, preds))
    }

    /// Penultimate-layer features of prepared crops.
    pub fn features(&self, crops: &[RasterImage]) -> Result<Vec<Vec<f64>>, EvalError> {
        Ok(self.run(crops)?.0)
    }

    pub fn predict(&self, crops: &[RasterImage]) -> Result<Vec<Option<ObjectLabel>>, EvalError> {
        Ok(self.run(crops)?.1.into_iter().map(class_label).collect())
    }

    /// Cross-entropy training with AdamW; returns the last batch loss.
    pub fn train(&self, data: &[(RasterImage, Option<ObjectLabel>)], cfg: &ClassifierTrainConfig) -> Result<f64, EvalError> {
        if data.is_empty() {
            return Err(EvalError::EmptyCorpus);
        }
        let params = ParamsAdamW { lr: cfg.learning_rate, weight_decay: 1e-4, ..Default::default() };
        let mut opt = AdamW::new(self.vars.map.all_vars(), params)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut cursor = order.len();
        let mut last = f64::NAN;
        for _ in 0..cfg.steps {
            let mut idx = Vec::with_capacity(cfg.batch_size);
            while idx.len() < cfg.batch_size {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                idx.push(order[cursor]);
                cursor += 1;
            }
            let crops: Vec<RasterImage> = idx.iter().map(|&i| data[i].0.clone()).collect();
            let targets: Vec<u32> = idx.iter().map(|&i| class_index(data[i].1) as u32).collect();
            let x = self.batch_tensor(&crops)?;
            let y = Tensor::from_vec(targets, idx.len(), &self.device)?;
            let (_, logits) = self.forward(&x)?;
            let loss = cross_entropy(&logits, &y)?;
            opt.backward_step(&loss)?;
            last = loss.to_scalar::<f32>()? as f64;
        }
        Ok(last)
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        self.vars.map.save(path)?;
        Ok(())
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self, EvalError> {
        let mut c = Self::new(0, device)?;
        c.vars.map.load(path)?;
        Ok(c)
    }
}

fn cross_entropy(logits: &Tensor, targets: &Tensor) -> candle_core::Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    let logp = shifted.broadcast_sub(&lse)?;
    let picked = logp.gather(&targets.unsqueeze(1)?, 1)?;
    picked.mean_all()?.neg()
}

/// Ground-truth crops from generated scenes: every shape box, plus one
/// shape-free background box per scene when one can be found.
pub fn training_crops(scenes: usize, cfg: &SceneConfig, seed: u64) -> Result<Vec<(RasterImage, Option<ObjectLabel>)>, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..scenes {
        let scene = generate_scene(rng.random(), cfg)?;
        let img = render(&scene);
        for s in &scene.shapes {
            out.push((prepare_crop(&img, &s.bbox), Some(s.label())));
        }
        for _ in 0..20 {
            let w = rng.random_range(cfg.min_side_px..=cfg.max_side_px);
            let h = rng.random_range(cfg.min_side_px..=cfg.max_side_px);
            let x = rng.random_range(0..=cfg.width - w);
            let y = rng.random_range(0..=cfg.height - h);
            let b = NormalizedBox::new(
                x as f64 / cfg.width as f64,
                y as f64 / cfg.height as f64,
                (x + w) as f64 / cfg.width as f64,
                (y + h) as f64 / cfg.height as f64,
            )
            .expect("sampled inside canvas");
            if scene.shapes.iter().all(|s| s.bbox.intersection_area(&b) == 0.0) {
                out.push((prepare_crop(&img, &b), None));
                break;
            }
        }
    }
    Ok(out)
}
