//! Region classification accuracy, layout AP, toy-FID / toy-SceneFID and
//! attention localization over generated corpora.

pub mod analytic;
pub mod ap;
pub mod features;
pub mod frechet;

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use analytic::{classify_region, detect, AnalyticConfig, Detection, MIN_CROP_PX};
pub use ap::{average_precision, coco_thresholds, ApResult, GroundTruth};
pub use features::{prepare_crop, training_crops, ClassifierTrainConfig, CropClassifier, CROP_SIZE, FEATURE_DIM};
pub use frechet::{frechet_distance, GaussianStats, COV_REGULARIZATION};

use crate::coords::NormalizedBox;
use crate::diffusion::{average_attention, AttentionRecord, DiffusionError};
use crate::query::{Query, TokenSequence};
use crate::scenegen::{ObjectLabel, RasterImage, SceneError, SceneSpec};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("crop of {width}x{height} px is below the {min}x{min} minimum")]
    CropTooSmall { width: usize, height: usize, min: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("insufficient samples: got {got}, need at least {min}")]
    InsufficientSamples { got: usize, min: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("region {region} text {text:?} does not name a color and a kind")]
    UnlabeledRegion { region: usize, text: String },
    #[error("query has no regions")]
    NoRegions,
    #[error("manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// A generated (or reference) image with the boxes and labels it should show.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub image: RasterImage,
    pub regions: Vec<GroundTruth>,
}

pub fn ground_truth_from_scene(scene: &SceneSpec) -> Vec<GroundTruth> {
    scene.shapes.iter().map(|s| GroundTruth { label: s.label(), bbox: s.bbox }).collect()
}

/// Region labels read back from `color kind` descriptions.
pub fn ground_truth_from_query(q: &Query) -> Result<Vec<GroundTruth>, EvalError> {
    q.regions
        .iter()
        .enumerate()
        .map(|(i, r)| {
            ObjectLabel::parse(&r.text)
                .map(|label| GroundTruth { label, bbox: r.bbox })
                .ok_or_else(|| EvalError::UnlabeledRegion { region: i, text: r.text.clone() })
        })
        .collect()
}

pub enum RegionClassifier<'a> {
    Analytic(AnalyticConfig),
    Trained(&'a CropClassifier),
}

impl RegionClassifier<'_> {
    pub fn classify(&self, img: &RasterImage, b: &NormalizedBox) -> Result<Option<ObjectLabel>, EvalError> {
        match self {
            Self::Analytic(cfg) => classify_region(img, b, cfg),
            Self::Trained(clf) => {
                let (x1, y1, x2, y2) = analytic::box_pixels(b, img.width(), img.height());
                let (w, h) = (x2 - x1, y2 - y1);
                if w < MIN_CROP_PX || h < MIN_CROP_PX {
                    return Err(EvalError::CropTooSmall { width: w, height: h, min: MIN_CROP_PX });
                }
                Ok(clf.predict(&[prepare_crop(img, b)])?[0])
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyResult {
    pub percent: f64,
    pub correct: usize,
    pub total: usize,
}

/// Per-item count of regions whose predicted label equals the expected one.
pub fn region_hits(items: &[EvalItem], clf: &RegionClassifier) -> Result<Vec<usize>, EvalError> {
    items
        .iter()
        .map(|it| {
            let mut hits = 0;
            for r in &it.regions {
                if clf.classify(&it.image, &r.bbox)? == Some(r.label) {
                    hits += 1;
                }
            }
            Ok(hits)
        })
        .collect()
}

pub fn object_accuracy(items: &[EvalItem], clf: &RegionClassifier) -> Result<AccuracyResult, EvalError> {
    let total: usize = items.iter().map(|i| i.regions.len()).sum();
    if total == 0 {
        return Err(EvalError::EmptyCorpus);
    }
    let correct: usize = region_hits(items, clf)?.iter().sum();
    Ok(AccuracyResult { percent: 100.0 * correct as f64 / total as f64, correct, total })
}

/// Analytic detections on every image scored against the item regions.
pub fn layout_ap(items: &[EvalItem], cfg: &AnalyticConfig) -> ApResult {
    let per_image: Vec<(Vec<Detection>, Vec<GroundTruth>)> =
        items.iter().map(|it| (detect(&it.image, cfg), it.regions.clone())).collect();
    average_precision(&per_image, &coco_thresholds())
}

/// Fewest samples per side accepted by the Fréchet metrics.
pub const MIN_FID_SAMPLES: usize = 2 * FEATURE_DIM;

fn fid_of(a: &[RasterImage], b: &[RasterImage], clf: &CropClassifier) -> Result<f64, EvalError> {
    let got = a.len().min(b.len());
    if got < MIN_FID_SAMPLES {
        return Err(EvalError::InsufficientSamples { got, min: MIN_FID_SAMPLES });
    }
    let fa = GaussianStats::fit(&clf.features(a)?)?;
    let fb = GaussianStats::fit(&clf.features(b)?)?;
    frechet_distance(&fa, &fb)
}

/// Whole images resized to the classifier input.
pub fn toy_fid(generated: &[RasterImage], reference: &[RasterImage], clf: &CropClassifier) -> Result<f64, EvalError> {
    let full = NormalizedBox::new(0.0, 0.0, 1.0, 1.0).expect("unit box");
    let prep = |xs: &[RasterImage]| xs.iter().map(|x| prepare_crop(x, &full)).collect::<Vec<_>>();
    fid_of(&prep(generated), &prep(reference), clf)
}

/// Crops at each item's region boxes.
pub fn toy_scene_fid(generated: &[EvalItem], reference: &[EvalItem], clf: &CropClassifier) -> Result<f64, EvalError> {
    let prep = |xs: &[EvalItem]| {
        xs.iter().flat_map(|it| it.regions.iter().map(move |r| prepare_crop(&it.image, &r.bbox))).collect::<Vec<_>>()
    };
    fid_of(&prep(generated), &prep(reference), clf)
}

/// Reported in place of an infinite inside/outside ratio.
pub const LOCALIZATION_CAP: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationResult {
    /// Mean over scored regions; `None` when every region was skipped.
    pub mean: Option<f64>,
    pub scores: Vec<f64>,
    pub skipped: usize,
}

/// Inside/outside attention density ratio for one map over a pixel rect.
pub fn density_ratio(map: &[f64], width: usize, height: usize, rect: (usize, usize, usize, usize)) -> Option<f64> {
    let (x1, y1, x2, y2) = rect;
    let n_in = (x2 - x1) * (y2 - y1);
    let n_out = width * height - n_in;
    if n_in == 0 || n_out == 0 {
        return None;
    }
    let mut inside = 0.0;
    let mut outside = 0.0;
    for r in 0..height {
        for c in 0..width {
            let v = map[r * width + c];
            if (y1..y2).contains(&r) && (x1..x2).contains(&c) {
                inside += v;
            } else {
                outside += v;
            }
        }
    }
    let (di, d_out) = (inside / n_in as f64, outside / n_out as f64);
    if d_out <= 0.0 {
        return Some(if di > 0.0 { LOCALIZATION_CAP } else { 1.0 });
    }
    Some((di / d_out).min(LOCALIZATION_CAP))
}

/// Region score = density ratio of the mean map of its four position tokens,
/// evaluated at the finest recorded attention resolution.
pub fn attention_localization(
    rec: &AttentionRecord,
    seq: &TokenSequence,
    query: &Query,
) -> Result<LocalizationResult, EvalError> {
    if query.regions.is_empty() {
        return Err(EvalError::NoRegions);
    }
    let groups = seq.position_groups();
    if groups.len() != query.regions.len() {
        return Err(EvalError::Dimension(format!(
            "{} position groups for {} regions",
            groups.len(),
            query.regions.len()
        )));
    }
    let (h, w) = rec
        .steps
        .iter()
        .flat_map(|s| &s.blocks)
        .map(|b| (b.height, b.width))
        .max_by_key(|&(h, w)| h * w)
        .ok_or_else(|| EvalError::Diffusion(DiffusionError::Attention("empty attention record".into())))?;
    let mut scores = Vec::new();
    let mut skipped = 0;
    for (region, keys) in query.regions.iter().zip(&groups) {
        let maps = average_attention(rec, keys, h, w)?;
        let mut mean = vec![0.0; h * w];
        for m in &maps {
            for (a, v) in mean.iter_mut().zip(m) {
                *a += v / maps.len() as f64;
            }
        }
        match density_ratio(&mean, w, h, analytic::box_pixels(&region.bbox, w, h)) {
            Some(s) => scores.push(s),
            None => {
                log::warn!("region {:?} is degenerate at {h}x{w} attention resolution; skipped", region.bbox);
                skipped += 1;
            }
        }
    }
    let mean = (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64);
    Ok(LocalizationResult { mean, scores, skipped })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub images: usize,
    pub regions: usize,
    pub ap_labels: usize,
    pub fid_samples: Option<usize>,
    pub scene_fid_samples: Option<usize>,
    pub localization_regions: Option<usize>,
    pub localization_skipped: Option<usize>,
}

/// Metrics that were not computed are `None`; computed ones are finite.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub object_accuracy: f64,
    pub ap50: f64,
    pub ap: f64,
    #[serde(rename = "toy_fid")]
    pub fid: Option<f64>,
    #[serde(rename = "toy_scene_fid")]
    pub scene_fid: Option<f64>,
    pub attn_localization: Option<f64>,
    pub counts: EvalCounts,
    /// Named config or artifact hashes, e.g. checkpoint and dataset manifest.
    pub hashes: std::collections::BTreeMap<String, String>,
}

impl EvalReport {
    pub fn check_finite(&self) -> Result<(), EvalError> {
        let named = [
            ("object_accuracy", Some(self.object_accuracy)),
            ("ap50", Some(self.ap50)),
            ("ap", Some(self.ap)),
            ("toy_fid", self.fid),
            ("toy_scene_fid", self.scene_fid),
            ("attn_localization", self.attn_localization),
        ];
        match named.iter().find(|(_, v)| v.is_some_and(|x| !x.is_finite())) {
            Some((n, _)) => Err(EvalError::NonFinite((*n).into())),
            None => Ok(()),
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<(), EvalError> {
        self.check_finite()?;
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Accuracy and AP from the analytic classifier and detector, plus the
/// Fréchet metrics when a feature classifier and a reference corpus are given.
pub fn evaluate(
    items: &[EvalItem],
    reference: Option<(&[EvalItem], &CropClassifier)>,
    cfg: &AnalyticConfig,
) -> Result<EvalReport, EvalError> {
    let acc = object_accuracy(items, &RegionClassifier::Analytic(cfg.clone()))?;
    let ap = layout_ap(items, cfg);
    let mut counts = EvalCounts {
        images: items.len(),
        regions: acc.total,
        ap_labels: ap.labels,
        fid_samples: None,
        scene_fid_samples: None,
        localization_regions: None,
        localization_skipped: None,
    };
    let (mut fid, mut scene_fid) = (None, None);
    if let Some((refs, clf)) = reference {
        let gen_imgs: Vec<RasterImage> = items.iter().map(|i| i.image.clone()).collect();
        let ref_imgs: Vec<RasterImage> = refs.iter().map(|i| i.image.clone()).collect();
        fid = Some(toy_fid(&gen_imgs, &ref_imgs, clf)?);
        counts.fid_samples = Some(gen_imgs.len().min(ref_imgs.len()));
        scene_fid = Some(toy_scene_fid(items, refs, clf)?);
        counts.scene_fid_samples = Some(acc.total.min(refs.iter().map(|r| r.regions.len()).sum()));
    }
    let report = EvalReport {
        object_accuracy: acc.percent,
        ap50: ap.ap50,
        ap: ap.ap,
        fid,
        scene_fid,
        attn_localization: None,
        counts,
        hashes: Default::default(),
    };
    report.check_finite()?;
    Ok(report)
}

/// One line of an eval manifest. Ground truth comes from `scene` when
/// present, otherwise from the query's region descriptions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalManifestEntry {
    pub image: PathBuf,
    pub query: Query,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneSpec>,
    /// Reference render for the Fréchet metrics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
}

impl EvalManifestEntry {
    pub fn ground_truth(&self) -> Result<Vec<GroundTruth>, EvalError> {
        match &self.scene {
            Some(s) => Ok(ground_truth_from_scene(s)),
            None => ground_truth_from_query(&self.query),
        }
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<EvalManifestEntry>, EvalError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e = serde_json::from_str(&line).map_err(|e| EvalError::Manifest { line: i + 1, detail: e.to_string() })?;
        out.push(e);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[EvalManifestEntry]) -> Result<(), EvalError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Resolves paths relative to the manifest's directory.
pub fn load_manifest_items(path: &Path) -> Result<(Vec<EvalItem>, Vec<Option<RasterImage>>), EvalError> {
    let root = path.parent().unwrap_or(Path::new("."));
    let mut items = Vec::new();
    let mut refs = Vec::new();
    for e in read_manifest(path)? {
        items.push(EvalItem { image: RasterImage::load_png(root.join(&e.image))?, regions: e.ground_truth()? });
        refs.push(match &e.reference {
            Some(p) => Some(RasterImage::load_png(root.join(p))?),
            None => None,
        });
    }
    Ok((items, refs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRow {
    pub index: usize,
    pub image: String,
    pub regions: usize,
    pub correct: usize,
    pub detections: usize,
}

/// Per-example results as CSV.
pub fn per_example_rows(items: &[EvalItem], names: &[String], cfg: &AnalyticConfig) -> Result<Vec<ExampleRow>, EvalError> {
    let hits = region_hits(items, &RegionClassifier::Analytic(cfg.clone()))?;
    Ok(items
        .iter()
        .zip(hits)
        .enumerate()
        .map(|(i, (it, correct))| ExampleRow {
            index: i,
            image: names.get(i).cloned().unwrap_or_default(),
            regions: it.regions.len(),
            correct,
            detections: detect(&it.image, cfg).len(),
        })
        .collect())
}

pub fn write_csv(path: &Path, rows: &[ExampleRow]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Hex sha256 of a value's canonical JSON.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(value).expect("serializable config")))
}
