//! Rule-based classifier and detector over palette-quantized pixels.
//! Shape kind is the template (rendered at the component's own tight box)
//! with the highest mask IoU, so ground-truth renders classify exactly.

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::coords::NormalizedBox;
use crate::scenegen::{shape_mask, ObjectLabel, RasterImage, ShapeColor, ShapeKind, BACKGROUND_RGB};

/// Crops smaller than this on either side cannot be classified.
pub const MIN_CROP_PX: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyticConfig {
    /// Fraction of crop pixels the dominant colour must cover, else "none".
    pub min_color_fraction: f64,
    /// Smallest connected component the detector reports, in pixels.
    pub min_component_px: usize,
}

impl Default for AnalyticConfig {
    fn default() -> Self {
        Self { min_color_fraction: 0.1, min_component_px: 8 }
    }
}

/// Palette index of a pixel: `Some(colour)` or `None` for background.
pub fn palette_color(rgb: [f32; 3]) -> Option<ShapeColor> {
    let d = |p: [u8; 3]| -> f32 { (0..3).map(|i| (rgb[i] - p[i] as f32 / 255.0).powi(2)).sum() };
    let mut best = (d(BACKGROUND_RGB), None);
    for c in ShapeColor::ALL {
        let dc = d(c.rgb8());
        if dc < best.0 {
            best = (dc, Some(c));
        }
    }
    best.1
}

pub fn palette_map(img: &RasterImage) -> Vec<Option<ShapeColor>> {
    (0..img.height()).flat_map(|r| (0..img.width()).map(move |c| (r, c))).map(|(r, c)| palette_color(img.get(r, c))).collect()
}

/// A 4-connected set of same-coloured pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub color: ShapeColor,
    pub pixels: Vec<(usize, usize)>,
    /// Tight box `(x1, y1, x2, y2)` in pixels, exclusive end.
    pub bounds: (usize, usize, usize, usize),
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    /// Pixel area over the area of the convex hull of all pixel corners.
    pub fn solidity(&self) -> f64 {
        let mut pts: Vec<(i64, i64)> = Vec::with_capacity(self.pixels.len() * 4);
        for &(r, c) in &self.pixels {
            let (r, c) = (r as i64, c as i64);
            pts.extend([(c, r), (c + 1, r), (c, r + 1), (c + 1, r + 1)]);
        }
        let hull = convex_hull(pts);
        let twice: i64 = (0..hull.len())
            .map(|i| {
                let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
                a.0 * b.1 - b.0 * a.1
            })
            .sum();
        let area = twice.abs() as f64 / 2.0;
        if area == 0.0 {
            1.0
        } else {
            (self.area() as f64 / area).min(1.0)
        }
    }

    /// Kind whose template best matches the component inside its tight box.
    pub fn kind(&self) -> ShapeKind {
        let (x1, y1, x2, y2) = self.bounds;
        let (w, h) = (x2 - x1, y2 - y1);
        let mut own = vec![false; w * h];
        for &(r, c) in &self.pixels {
            own[(r - y1) * w + (c - x1)] = true;
        }
        best_template(&own, w, h)
    }
}

fn best_template(mask: &[bool], w: usize, h: usize) -> ShapeKind {
    let mut best = (f64::NEG_INFINITY, ShapeKind::Square);
    for kind in ShapeKind::ALL {
        let t = shape_mask(kind, w, h);
        let inter = t.iter().zip(mask).filter(|(a, b)| **a && **b).count();
        let union = t.iter().zip(mask).filter(|(a, b)| **a || **b).count();
        let iou = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
        if iou > best.0 {
            best = (iou, kind);
        }
    }
    best.1
}

/// Andrew's monotone chain; returns the hull counter-clockwise.
fn convex_hull(mut pts: Vec<(i64, i64)>) -> Vec<(i64, i64)> {
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (i64, i64), a: (i64, i64), b: (i64, i64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut lower: Vec<(i64, i64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(i64, i64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// 4-connected components of every palette colour, in raster order of their first pixel.
pub fn components(colors: &[Option<ShapeColor>], width: usize, height: usize) -> Vec<Component> {
    let mut seen = vec![false; colors.len()];
    let mut out = Vec::new();
    for start in 0..colors.len() {
        let Some(color) = colors[start] else { continue };
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut pixels = Vec::new();
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        while let Some(i) = stack.pop() {
            let (r, c) = (i / width, i % width);
            pixels.push((r, c));
            x1 = x1.min(c);
            y1 = y1.min(r);
            x2 = x2.max(c + 1);
            y2 = y2.max(r + 1);
            let mut push = |j: usize| {
                if !seen[j] && colors[j] == Some(color) {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                push(i - width);
            }
            if r + 1 < height {
                push(i + width);
            }
            if c > 0 {
                push(i - 1);
            }
            if c + 1 < width {
                push(i + 1);
            }
        }
        pixels.sort_unstable();
        out.push(Component { color, pixels, bounds: (x1, y1, x2, y2) });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: ObjectLabel,
    #[serde(rename = "box")]
    pub bbox: NormalizedBox,
    pub score: f64,
}

fn normalized(bounds: (usize, usize, usize, usize), width: usize, height: usize) -> NormalizedBox {
    let (x1, y1, x2, y2) = bounds;
    NormalizedBox::new(
        x1 as f64 / width as f64,
        y1 as f64 / height as f64,
        x2 as f64 / width as f64,
        y2 as f64 / height as f64,
    )
    .expect("component bounds are non-empty and inside the image")
}

/// One detection per sufficiently large component; score is its solidity.
pub fn detect(img: &RasterImage, cfg: &AnalyticConfig) -> Vec<Detection> {
    let (w, h) = (img.width(), img.height());
    components(&palette_map(img), w, h)
        .into_iter()
        .filter(|c| c.area() >= cfg.min_component_px.max(1))
        .map(|c| Detection {
            label: ObjectLabel { kind: c.kind(), color: c.color },
            bbox: normalized(c.bounds, w, h),
            score: c.solidity(),
        })
        .collect()
}

/// Pixel rectangle of a normalized box, rounding edges to the nearest pixel.
pub fn box_pixels(b: &NormalizedBox, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let px = |v: f64, n: usize| ((v * n as f64).round() as usize).min(n);
    (px(b.x1(), width), px(b.y1(), height), px(b.x2(), width), px(b.y2(), height))
}

/// Label of the object inside `bbox`, or `None` for background.
pub fn classify_region(img: &RasterImage, bbox: &NormalizedBox, cfg: &AnalyticConfig) -> Result<Option<ObjectLabel>, EvalError> {
    let (x1, y1, x2, y2) = box_pixels(bbox, img.width(), img.height());
    let (w, h) = (x2.saturating_sub(x1), y2.saturating_sub(y1));
    if w < MIN_CROP_PX || h < MIN_CROP_PX {
        return Err(EvalError::CropTooSmall { width: w, height: h, min: MIN_CROP_PX });
    }
    let mut colors = Vec::with_capacity(w * h);
    let mut counts = [0usize; ShapeColor::ALL.len()];
    for r in y1..y2 {
        for c in x1..x2 {
            let p = palette_color(img.get(r, c));
            if let Some(col) = p {
                counts[ShapeColor::ALL.iter().position(|&k| k == col).unwrap()] += 1;
            }
            colors.push(p);
        }
    }
    let (best_i, &best_n) = counts.iter().enumerate().max_by_key(|&(i, n)| (*n, std::cmp::Reverse(i))).unwrap();
    if (best_n as f64) < cfg.min_color_fraction * (w * h) as f64 || best_n == 0 {
        return Ok(None);
    }
    let color = ShapeColor::ALL[best_i];
    let only: Vec<Option<ShapeColor>> = colors.iter().map(|&c| c.filter(|&k| k == color)).collect();
    let largest = components(&only, w, h).into_iter().max_by_key(|c| c.area()).expect("dominant colour has pixels");
    Ok(Some(ObjectLabel { kind: largest.kind(), color }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_scene, render, SceneConfig, SceneSpec, ShapeInstance};

    #[test]
    fn ground_truth_crops_classify_exactly() {
        let cfg = AnalyticConfig::default();
        for seed in 0..300 {
            let scene = generate_scene(seed, &SceneConfig::default()).unwrap();
            let img = render(&scene);
            for s in &scene.shapes {
                assert_eq!(classify_region(&img, &s.bbox, &cfg).unwrap(), Some(s.label()), "seed {seed}");
            }
        }
    }

    #[test]
    fn background_crop_is_none_and_tiny_crop_errors() {
        let img = RasterImage::filled(64, 64, BACKGROUND_RGB.map(|c| c as f32 / 255.0));
        let b = NormalizedBox::new(0.1, 0.1, 0.5, 0.5).unwrap();
        assert_eq!(classify_region(&img, &b, &AnalyticConfig::default()).unwrap(), None);
        let tiny = NormalizedBox::new(0.1, 0.1, 0.12, 0.5).unwrap();
        assert!(classify_region(&img, &tiny, &AnalyticConfig::default()).is_err());
    }

    #[test]
    fn detector_finds_each_shape() {
        let cfg = AnalyticConfig::default();
        assert!(detect(&RasterImage::filled(32, 32, [0.5, 0.5, 0.5]), &cfg).is_empty());
        for seed in 0..200 {
            let scene = generate_scene(seed, &SceneConfig::default()).unwrap();
            let dets = detect(&render(&scene), &cfg);
            assert_eq!(dets.len(), scene.shapes.len(), "seed {seed}");
            for s in &scene.shapes {
                let best = dets.iter().filter(|d| d.label == s.label()).map(|d| d.bbox.iou(&s.bbox)).fold(0.0, f64::max);
                assert!(best >= 0.9, "seed {seed}: iou {best}");
            }
            assert!(dets.iter().all(|d| d.score > 0.0 && d.score <= 1.0));
        }
    }

    #[test]
    fn two_disjoint_shapes_two_detections() {
        let mk = |x1, x2, kind, color| ShapeInstance { kind, color, bbox: NormalizedBox::new(x1, 0.2, x2, 0.6).unwrap() };
        let scene = SceneSpec {
            height: 40,
            width: 40,
            shapes: vec![mk(0.1, 0.4, ShapeKind::Circle, ShapeColor::Red), mk(0.5, 0.9, ShapeKind::Cross, ShapeColor::Red)],
            seed: 0,
        };
        assert_eq!(detect(&render(&scene), &AnalyticConfig::default()).len(), 2);
    }

    #[test]
    fn solidity_of_square_is_one() {
        let px: Vec<_> = (0..3).flat_map(|r| (0..4).map(move |c| (r, c))).collect();
        let comp = Component { color: ShapeColor::Red, pixels: px, bounds: (0, 0, 4, 3) };
        assert_eq!(comp.solidity(), 1.0);
        assert_eq!(comp.kind(), ShapeKind::Square);
    }
}
