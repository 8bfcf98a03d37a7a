//! COCO-style average precision: per-label greedy matching, 101-point
//! interpolated precision, labels without ground truth excluded.

use serde::{Deserialize, Serialize};

use super::analytic::Detection;
use crate::coords::NormalizedBox;
use crate::scenegen::ObjectLabel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub label: ObjectLabel,
    #[serde(rename = "box")]
    pub bbox: NormalizedBox,
}

/// IoU thresholds `.50:.05:.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub ap50: f64,
    /// Mean over the supplied thresholds.
    pub ap: f64,
    /// Labels with at least one ground-truth box.
    pub labels: usize,
}

/// 101-point interpolated AP for one label at one threshold.
/// `images[i] = (detections, ground truth)` already filtered to the label.
fn label_ap(images: &[(Vec<&Detection>, Vec<&GroundTruth>)], thr: f64) -> Option<f64> {
    let n_gt: usize = images.iter().map(|(_, g)| g.len()).sum();
    if n_gt == 0 {
        return None;
    }
    let mut dets: Vec<(usize, usize, f64)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, (d, _))| d.iter().enumerate().map(move |(j, det)| (i, j, det.score)))
        .collect();
    // stable: ties keep image/detection order
    dets.sort_by(|a, b| b.2.total_cmp(&a.2));
    let mut matched: Vec<Vec<bool>> = images.iter().map(|(_, g)| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(dets.len());
    for &(i, j, _) in &dets {
        let det = images[i].0[j];
        let mut best: Option<(usize, f64)> = None;
        for (k, gt) in images[i].1.iter().enumerate() {
            if matched[i][k] {
                continue;
            }
            let iou = det.bbox.iou(&gt.bbox);
            if iou >= thr && best.is_none_or(|(_, b)| iou > b) {
                best = Some((k, iou));
            }
        }
        match best {
            Some((k, _)) => {
                matched[i][k] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let (mut ctp, mut cfp) = (0usize, 0usize);
    for &t in &tp {
        if t {
            ctp += 1;
        } else {
            cfp += 1;
        }
        precision.push(ctp as f64 / (ctp + cfp) as f64);
        recall.push(ctp as f64 / n_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let target = r as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < target);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / 101.0)
}

/// AP over a corpus. `per_image[i] = (detections, ground truth)` for image `i`.
pub fn average_precision(per_image: &[(Vec<Detection>, Vec<GroundTruth>)], thresholds: &[f64]) -> ApResult {
    let mut labels: Vec<ObjectLabel> = per_image.iter().flat_map(|(_, g)| g.iter().map(|x| x.label)).collect();
    labels.sort();
    labels.dedup();
    if labels.is_empty() || thresholds.is_empty() {
        return ApResult { ap50: 0.0, ap: 0.0, labels: labels.len() };
    }
    let at = |thr: f64| -> f64 {
        let aps: Vec<f64> = labels
            .iter()
            .filter_map(|&l| {
                let imgs: Vec<(Vec<&Detection>, Vec<&GroundTruth>)> = per_image
                    .iter()
                    .map(|(d, g)| (d.iter().filter(|x| x.label == l).collect(), g.iter().filter(|x| x.label == l).collect()))
                    .collect();
                label_ap(&imgs, thr)
            })
            .collect();
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    let per_thr: Vec<f64> = thresholds.iter().map(|&t| at(t)).collect();
    ApResult { ap50: at(0.5), ap: per_thr.iter().sum::<f64>() / per_thr.len() as f64, labels: labels.len() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{ShapeColor, ShapeKind};

    fn label() -> ObjectLabel {
        ObjectLabel { kind: ShapeKind::Square, color: ShapeColor::Red }
    }

    fn b(x1: f64, x2: f64) -> NormalizedBox {
        NormalizedBox::new(x1, 0.0, x2, 0.5).unwrap()
    }

    #[test]
    fn perfect_and_empty() {
        let gt = vec![GroundTruth { label: label(), bbox: b(0.1, 0.3) }, GroundTruth { label: label(), bbox: b(0.5, 0.9) }];
        let dets: Vec<Detection> = gt.iter().map(|g| Detection { label: g.label, bbox: g.bbox, score: 0.9 }).collect();
        let r = average_precision(&[(dets, gt.clone())], &coco_thresholds());
        assert_eq!((r.ap50, r.ap), (1.0, 1.0));
        let r = average_precision(&[(vec![], gt)], &coco_thresholds());
        assert_eq!((r.ap50, r.ap), (0.0, 0.0));
    }

    #[test]
    fn monotone_in_threshold() {
        let gt = vec![GroundTruth { label: label(), bbox: b(0.1, 0.5) }];
        let det = vec![Detection { label: label(), bbox: b(0.15, 0.5), score: 0.5 }];
        let data = [(det, gt)];
        let mut prev = f64::INFINITY;
        for t in coco_thresholds() {
            let v = average_precision(&data, &[t]).ap;
            assert!(v <= prev);
            prev = v;
        }
    }
}
