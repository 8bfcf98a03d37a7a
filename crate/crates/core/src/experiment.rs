//! The three-variant ordering experiment, the guidance-scale sweep and the
//! attention-localization comparison, at a configurable scale.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionError, DiffusionModel, ModelConfig, SamplerConfig, TrainConfig, Trainer};
use crate::eval::{
    attention_localization, evaluate, ground_truth_from_scene, training_crops, ClassifierTrainConfig, CropClassifier,
    EvalError, EvalItem, EvalReport, AnalyticConfig, MIN_FID_SAMPLES,
};
use crate::scenegen::{scene_lexicon_vocab, Dataset, DatasetManifest, DatasetRecord, QueryMode, SceneConfig, SceneError, SplitSizes};

pub const TOKENS_OVER_WORDS: f64 = 15.0;
pub const TOKENS_OVER_CAPTION: f64 = 20.0;
pub const AP50_TOKENS_OVER_WORDS: f64 = 0.25;
pub const GUIDANCE_GAIN: f64 = 5.0;
pub const LOCALIZATION_TRAINED_MIN: f64 = 2.0;
pub const LOCALIZATION_UNTRAINED_MAX: f64 = 1.2;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("invalid experiment config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub splits: SplitSizes,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub modes: Vec<QueryMode>,
    pub guidance_scales: Vec<f64>,
    /// Held-out queries used for attention localization.
    pub localization_queries: usize,
    pub classifier: ClassifierTrainConfig,
    /// Scenes whose ground-truth crops train the feature classifier.
    pub classifier_scenes: usize,
    /// Images denoised together during evaluation.
    pub sample_batch: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: SceneConfig { max_shapes: 3, ..Default::default() },
            splits: SplitSizes { train: 16_000, test: 1_000 },
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig { record_attention: false, ..Default::default() },
            modes: vec![QueryMode::CaptionOnly, QueryMode::PositionWords, QueryMode::PositionTokens],
            guidance_scales: vec![1.0, 1.5, 2.0, 4.0, 7.5],
            localization_queries: 200,
            classifier: ClassifierTrainConfig::default(),
            classifier_scenes: 1_500,
            sample_batch: 8,
        }
    }
}

impl ExperimentConfig {
    /// Seconds-scale configuration that exercises every stage.
    pub fn smoke() -> Self {
        let model = ModelConfig::tiny();
        Self {
            scene: SceneConfig { height: 16, width: 16, max_shapes: 2, min_side_px: 4, max_side_px: 8, ..Default::default() },
            splits: SplitSizes { train: 24, test: 6 },
            model,
            train: TrainConfig { batch_size: 4, micro_batch: 4, steps: 3, ..Default::default() },
            sampler: SamplerConfig { steps: 5, record_attention: false, ..Default::default() },
            guidance_scales: vec![1.0, 4.0],
            localization_queries: 2,
            classifier: ClassifierTrainConfig { steps: 2, batch_size: 8, ..Default::default() },
            classifier_scenes: 8,
            sample_batch: 4,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.scene.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.sampler.validate(self.model.schedule.steps)?;
        if self.scene.height != self.model.image_size || self.scene.width != self.model.image_size {
            return Err(ExperimentError::Config(format!(
                "scenes are {}x{} but the model expects {}",
                self.scene.height, self.scene.width, self.model.image_size
            )));
        }
        if self.sample_batch == 0 || self.splits.test == 0 {
            return Err(ExperimentError::Config("sample batch and test split must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub criterion: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub mode: QueryMode,
    pub guidance_scale: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub dataset_hash: String,
    pub variants: Vec<VariantResult>,
    pub sweep: Vec<VariantResult>,
    pub localization_trained: Option<f64>,
    pub localization_untrained: Option<f64>,
    pub checkpoints: BTreeMap<String, String>,
    pub verdicts: Vec<Verdict>,
}

fn accuracy_of(results: &[VariantResult], mode: QueryMode) -> Option<&EvalReport> {
    results.iter().find(|r| r.mode == mode).map(|r| &r.report)
}

pub fn ordering_verdict(results: &[VariantResult]) -> Verdict {
    let criterion = "ordering".to_string();
    let (Some(tok), Some(words), Some(cap)) = (
        accuracy_of(results, QueryMode::PositionTokens),
        accuracy_of(results, QueryMode::PositionWords),
        accuracy_of(results, QueryMode::CaptionOnly),
    ) else {
        return Verdict { criterion, pass: false, detail: "missing variant".into() };
    };
    let pass = tok.object_accuracy >= words.object_accuracy + TOKENS_OVER_WORDS
        && tok.object_accuracy >= cap.object_accuracy + TOKENS_OVER_CAPTION
        && tok.ap50 >= words.ap50 + AP50_TOKENS_OVER_WORDS;
    let detail = format!(
        "object accuracy tokens {:.2} / words {:.2} / caption {:.2}; ap50 tokens {:.3} / words {:.3}",
        tok.object_accuracy, words.object_accuracy, cap.object_accuracy, tok.ap50, words.ap50
    );
    Verdict { criterion, pass, detail }
}

pub fn guidance_verdict(sweep: &[VariantResult]) -> Verdict {
    let criterion = "guidance sweep".to_string();
    let at = |s: f64| sweep.iter().find(|r| r.guidance_scale == s).map(|r| r.report.object_accuracy);
    let detail = sweep
        .iter()
        .map(|r| {
            let fid = r.report.fid.map_or("n/a".to_string(), |f| format!("{f:.3}"));
            format!("s={}: acc {:.2}, toy-FID {fid}", r.guidance_scale, r.report.object_accuracy)
        })
        .collect::<Vec<_>>()
        .join("; ");
    match (at(1.0), at(4.0)) {
        (Some(a1), Some(a4)) => Verdict { criterion, pass: a4 >= a1 + GUIDANCE_GAIN, detail },
        _ => Verdict { criterion, pass: false, detail: format!("sweep lacks s=1.0 or s=4.0; {detail}") },
    }
}

pub fn localization_verdict(trained: Option<f64>, untrained: Option<f64>) -> Verdict {
    let criterion = "attention localization".to_string();
    let pass = matches!((trained, untrained), (Some(t), Some(u)) if t >= LOCALIZATION_TRAINED_MIN && u <= LOCALIZATION_UNTRAINED_MAX);
    Verdict { criterion, pass, detail: format!("trained {trained:?}, untrained {untrained:?}") }
}

/// Trains one model on the training split with queries rendered in `mode`.
pub fn train_variant(
    dataset: &Dataset,
    mode: QueryMode,
    cfg: &ExperimentConfig,
    on_step: &mut dyn FnMut(usize, f64),
) -> Result<DiffusionModel, ExperimentError> {
    let vocab = scene_lexicon_vocab(&cfg.model.quantizer);
    let model = DiffusionModel::new(cfg.model.clone(), vocab, DType::F32, &Device::Cpu, cfg.seed)?;
    let train = &dataset.train;
    if train.is_empty() {
        return Err(ExperimentError::Config("empty training split".into()));
    }
    {
        let mut trainer = Trainer::new(&model, cfg.train.clone())?;
        let mut data_rng = trainer.data_rng();
        for step in 0..cfg.train.steps {
            let idx: Vec<usize> = (0..cfg.train.batch_size).map(|_| data_rng.random_range(0..train.len())).collect();
            let imgs: Vec<_> = idx.iter().map(|&i| train[i].render()).collect();
            let seqs = idx.iter().map(|&i| model.encode(train[i].query(mode))).collect::<Result<Vec<_>, _>>()?;
            let loss = trainer.step(&model.images_to_latents(&imgs)?, &seqs)?;
            on_step(step, loss);
        }
    }
    Ok(model)
}

/// Per-record sampling seed, shared across variants so they start from the same noise.
fn sample_seed(cfg: &ExperimentConfig, index: usize) -> u64 {
    cfg.sampler.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn generate(
    model: &DiffusionModel,
    records: &[DatasetRecord],
    mode: QueryMode,
    sampler: &SamplerConfig,
    cfg: &ExperimentConfig,
) -> Result<Vec<EvalItem>, ExperimentError> {
    let mut out = Vec::with_capacity(records.len());
    for (c, chunk) in records.chunks(cfg.sample_batch).enumerate() {
        let queries: Vec<_> = chunk.iter().map(|r| r.query(mode).clone()).collect();
        let seeds: Vec<u64> = (0..chunk.len()).map(|i| sample_seed(cfg, c * cfg.sample_batch + i)).collect();
        let imgs = model.sample_batch(&queries, &seeds, sampler)?;
        out.extend(imgs.into_iter().zip(chunk).map(|(image, r)| EvalItem { image, regions: ground_truth_from_scene(&r.scene) }));
    }
    Ok(out)
}

fn reference_items(records: &[DatasetRecord]) -> Vec<EvalItem> {
    records.iter().map(|r| EvalItem { image: r.render(), regions: ground_truth_from_scene(&r.scene) }).collect()
}

fn evaluate_items(
    items: &[EvalItem],
    reference: &[EvalItem],
    clf: Option<&CropClassifier>,
) -> Result<EvalReport, ExperimentError> {
    let region_count = |xs: &[EvalItem]| xs.iter().map(|i| i.regions.len()).sum::<usize>();
    let enough = items.len().min(reference.len()) >= MIN_FID_SAMPLES
        && region_count(items).min(region_count(reference)) >= MIN_FID_SAMPLES;
    let refs = match clf {
        Some(c) if enough => Some((reference, c)),
        _ => None,
    };
    Ok(evaluate(items, refs, &AnalyticConfig::default())?)
}

/// Mean per-query localization score on position-token queries.
pub fn localization(
    model: &DiffusionModel,
    records: &[DatasetRecord],
    sampler: &SamplerConfig,
) -> Result<Option<f64>, ExperimentError> {
    let cfg = SamplerConfig { record_attention: true, ..sampler.clone() };
    let mut scores = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let q = r.query(QueryMode::PositionTokens);
        if q.regions.is_empty() {
            continue;
        }
        let s = model.sample(q, &SamplerConfig { seed: sampler.seed ^ i as u64, ..cfg.clone() })?;
        if let Some(m) = attention_localization(&s.attention, &s.sequence, q)?.mean {
            scores.push(m);
        }
    }
    Ok((!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64))
}

/// Runs every stage, writing checkpoints and `report.json` under `out`.
pub fn run(cfg: &ExperimentConfig, out: &Path, log: &mut dyn FnMut(&str)) -> Result<ExperimentReport, ExperimentError> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let manifest = DatasetManifest::new(cfg.seed, cfg.scene.clone(), cfg.splits, cfg.model.quantizer)?;
    let dataset_hash = manifest.hash();
    let dataset = Dataset::generate(manifest)?;
    log(&format!("dataset {dataset_hash}: {} train / {} test", dataset.train.len(), dataset.test.len()));

    let clf = CropClassifier::new(cfg.seed, &Device::Cpu)?;
    let crops = training_crops(cfg.classifier_scenes, &cfg.scene, cfg.seed ^ 0xC1A5)?;
    let loss = clf.train(&crops, &cfg.classifier)?;
    log(&format!("feature classifier trained on {} crops, final loss {loss:.4}", crops.len()));

    let reference = reference_items(&dataset.test);
    let mut variants = Vec::new();
    let mut sweep = Vec::new();
    let mut checkpoints = BTreeMap::new();
    let mut localization_trained = None;
    for &mode in &cfg.modes {
        let every = (cfg.train.steps / 20).max(1);
        let model = train_variant(&dataset, mode, cfg, &mut |step, loss| {
            if step % every == 0 || step + 1 == cfg.train.steps {
                log(&format!("{} step {step} loss {loss:.4}", mode.name()));
            }
        })?;
        let path = out.join(format!("{}.safetensors", mode.name()));
        checkpoints.insert(mode.name().to_string(), model.save(&path, Some(&dataset_hash), cfg.train.steps)?);
        let items = generate(&model, &dataset.test, mode, &cfg.sampler, cfg)?;
        let report = evaluate_items(&items, &reference, Some(&clf))?;
        log(&format!("{} at s={}: accuracy {:.2}, ap50 {:.3}", mode.name(), cfg.sampler.guidance_scale, report.object_accuracy, report.ap50));
        variants.push(VariantResult { mode, guidance_scale: cfg.sampler.guidance_scale, report });
        if mode == QueryMode::PositionTokens {
            for &s in &cfg.guidance_scales {
                let sampler = SamplerConfig { guidance_scale: s, ..cfg.sampler.clone() };
                let items = generate(&model, &dataset.test, mode, &sampler, cfg)?;
                let report = evaluate_items(&items, &reference, Some(&clf))?;
                log(&format!("sweep s={s}: accuracy {:.2}", report.object_accuracy));
                sweep.push(VariantResult { mode, guidance_scale: s, report });
            }
            let n = cfg.localization_queries.min(dataset.test.len());
            localization_trained = localization(&model, &dataset.test[..n], &cfg.sampler)?;
        }
    }
    let n = cfg.localization_queries.min(dataset.test.len());
    let untrained = DiffusionModel::new(
        cfg.model.clone(),
        scene_lexicon_vocab(&cfg.model.quantizer),
        DType::F32,
        &Device::Cpu,
        cfg.seed,
    )?;
    let localization_untrained = localization(&untrained, &dataset.test[..n], &cfg.sampler)?;
    let verdicts = vec![
        ordering_verdict(&variants),
        guidance_verdict(&sweep),
        localization_verdict(localization_trained, localization_untrained),
    ];
    let report = ExperimentReport {
        config: cfg.clone(),
        dataset_hash,
        variants,
        sweep,
        localization_trained,
        localization_untrained,
        checkpoints,
        verdicts,
    };
    std::fs::write(out.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}
