//! Synthetic shape scenes with exact ground-truth boxes, their rasterization,
//! and the query variants derived from them.

mod dataset;
mod image;
mod words;

pub use dataset::{Dataset, DatasetManifest, DatasetRecord, SplitSizes, DATASET_FORMAT_VERSION};
pub use image::RasterImage;
pub use words::{lexicon, scene_lexicon_vocab, scene_to_query, AreaTerciles, PositionWordRules, QueryMode};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coords::NormalizedBox;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("could not place {wanted} shapes within {attempts} attempts (seed {seed})")]
    Unsatisfiable { wanted: usize, attempts: usize, seed: u64 },
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] ::image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("dataset mismatch: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle, ShapeKind::Cross];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Whether the point `(u, v)` in box-local `[0,1]²` coordinates is painted.
    /// `w` and `h` are the box extent in pixels.
    pub fn covers(self, u: f64, v: f64, row: usize, w: usize, h: usize) -> bool {
        match self {
            ShapeKind::Square => true,
            ShapeKind::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            ShapeKind::Triangle => {
                // apex at top centre; each row uses the width at its lower edge
                let half = ((row + 1) as f64 / (2 * h) as f64).max(0.5 / w as f64);
                (u - 0.5).abs() <= half + 1e-9
            }
            ShapeKind::Cross => (u - 0.5).abs() <= 1.0 / 6.0 || (v - 0.5).abs() <= 1.0 / 6.0,
        }
    }
}

/// Row-major `h x w` mask of the pixels a shape of `kind` paints in a `w x h` box.
pub fn shape_mask(kind: ShapeKind, w: usize, h: usize) -> Vec<bool> {
    let mut m = Vec::with_capacity(w * h);
    for row in 0..h {
        let v = (row as f64 + 0.5) / h as f64;
        for col in 0..w {
            m.push(kind.covers((col as f64 + 0.5) / w as f64, v, row, w, h));
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeColor {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Cyan,
}

/// Canvas background, mid gray.
pub const BACKGROUND_RGB: [u8; 3] = [128, 128, 128];

impl ShapeColor {
    pub const ALL: [ShapeColor; 6] = [
        ShapeColor::Red,
        ShapeColor::Green,
        ShapeColor::Blue,
        ShapeColor::Yellow,
        ShapeColor::Purple,
        ShapeColor::Cyan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeColor::Red => "red",
            ShapeColor::Green => "green",
            ShapeColor::Blue => "blue",
            ShapeColor::Yellow => "yellow",
            ShapeColor::Purple => "purple",
            ShapeColor::Cyan => "cyan",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    pub fn rgb8(self) -> [u8; 3] {
        match self {
            ShapeColor::Red => [220, 30, 30],
            ShapeColor::Green => [30, 190, 50],
            ShapeColor::Blue => [30, 60, 230],
            ShapeColor::Yellow => [240, 220, 20],
            ShapeColor::Purple => [150, 30, 190],
            ShapeColor::Cyan => [20, 210, 220],
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        self.rgb8().map(|c| c as f32 / 255.0)
    }
}

/// The `(kind, color)` category of a shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObjectLabel {
    pub kind: ShapeKind,
    pub color: ShapeColor,
}

impl ObjectLabel {
    pub const COUNT: usize = ShapeKind::ALL.len() * ShapeColor::ALL.len();

    pub fn index(self) -> usize {
        self.kind as usize * ShapeColor::ALL.len() + self.color as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        (i < Self::COUNT).then(|| Self {
            kind: ShapeKind::ALL[i / ShapeColor::ALL.len()],
            color: ShapeColor::ALL[i % ShapeColor::ALL.len()],
        })
    }

    pub fn all() -> impl Iterator<Item = Self> {
        (0..Self::COUNT).filter_map(Self::from_index)
    }

    /// `"red square"` style description.
    pub fn description(self) -> String {
        format!("{} {}", self.color.name(), self.kind.name())
    }

    /// Reads a `color kind` description back, ignoring any other words.
    pub fn parse(text: &str) -> Option<Self> {
        let mut color = None;
        let mut kind = None;
        for w in text.split_whitespace() {
            color = color.or_else(|| ShapeColor::from_name(w));
            kind = kind.or_else(|| ShapeKind::from_name(w));
        }
        Some(Self { kind: kind?, color: color? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeInstance {
    pub kind: ShapeKind,
    pub color: ShapeColor,
    #[serde(rename = "box")]
    pub bbox: NormalizedBox,
}

impl ShapeInstance {
    pub fn label(&self) -> ObjectLabel {
        ObjectLabel { kind: self.kind, color: self.color }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Minimum box area as a fraction of the canvas.
    pub min_area: f64,
    pub max_iou: f64,
    /// Minimum empty pixels between boxes; `None` allows touching and overlap up to `max_iou`.
    pub min_gap_px: Option<usize>,
    pub min_side_px: usize,
    pub max_side_px: usize,
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            min_shapes: 1,
            max_shapes: 4,
            min_area: 0.02,
            max_iou: 0.1,
            min_gap_px: Some(1),
            min_side_px: 6,
            max_side_px: 32,
            max_attempts: 1000,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::Config(m.to_string()));
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return bad("need 1 <= min_shapes <= max_shapes");
        }
        if self.min_side_px == 0 || self.min_side_px > self.max_side_px {
            return bad("need 1 <= min_side_px <= max_side_px");
        }
        if self.max_side_px > self.width.min(self.height) {
            return bad("max_side_px exceeds the canvas");
        }
        let canvas = (self.width * self.height) as f64;
        if ((self.max_side_px * self.max_side_px) as f64) < self.min_area * canvas {
            return bad("min_area unreachable with max_side_px");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub shapes: Vec<ShapeInstance>,
    pub seed: u64,
}

impl SceneSpec {
    /// Box corners in integer pixel coordinates `(x1, y1, x2, y2)`, exclusive end.
    pub fn pixel_box(&self, b: &NormalizedBox) -> (usize, usize, usize, usize) {
        pixel_box(b, self.width, self.height)
    }
}

pub(crate) fn pixel_box(b: &NormalizedBox, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let px = |v: f64, n: usize| ((v * n as f64).round() as usize).min(n);
    (px(b.x1(), width), px(b.y1(), height), px(b.x2(), width), px(b.y2(), height))
}

fn boxes_conflict(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize), gap: usize) -> bool {
    let (ax1, ay1, ax2, ay2) = a;
    let (bx1, by1, bx2, by2) = b;
    ax1 < bx2 + gap && bx1 < ax2 + gap && ay1 < by2 + gap && by1 < ay2 + gap
}

/// Rejection-sample a scene. Deterministic in `seed`.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<SceneSpec, SceneError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wanted = rng.random_range(config.min_shapes..=config.max_shapes);
    let (w_px, h_px) = (config.width, config.height);
    let min_px_area = config.min_area * (w_px * h_px) as f64;

    let mut placed: Vec<((usize, usize, usize, usize), NormalizedBox)> = Vec::new();
    let mut shapes = Vec::with_capacity(wanted);
    let mut attempts = 0;
    while shapes.len() < wanted {
        if attempts >= config.max_attempts {
            return Err(SceneError::Unsatisfiable { wanted, attempts, seed });
        }
        attempts += 1;
        let w = rng.random_range(config.min_side_px..=config.max_side_px);
        let h = rng.random_range(config.min_side_px..=config.max_side_px);
        if ((w * h) as f64) < min_px_area {
            continue;
        }
        let x = rng.random_range(0..=w_px - w);
        let y = rng.random_range(0..=h_px - h);
        let px = (x, y, x + w, y + h);
        let bbox = NormalizedBox::new(
            x as f64 / w_px as f64,
            y as f64 / h_px as f64,
            (x + w) as f64 / w_px as f64,
            (y + h) as f64 / h_px as f64,
        )
        .expect("sampled box lies inside the canvas");
        let clash = placed.iter().any(|(p, b)| {
            b.iou(&bbox) > config.max_iou || config.min_gap_px.is_some_and(|g| boxes_conflict(*p, px, g))
        });
        if clash {
            continue;
        }
        let kind = ShapeKind::ALL[rng.random_range(0..ShapeKind::ALL.len())];
        let color = ShapeColor::ALL[rng.random_range(0..ShapeColor::ALL.len())];
        placed.push((px, bbox));
        shapes.push(ShapeInstance { kind, color, bbox });
    }
    Ok(SceneSpec { height: h_px, width: w_px, shapes, seed })
}

/// Paint shapes in order over the gray background.
pub fn render(scene: &SceneSpec) -> RasterImage {
    let mut img = RasterImage::filled(scene.height, scene.width, BACKGROUND_RGB.map(|c| c as f32 / 255.0));
    for shape in &scene.shapes {
        let (x1, y1, x2, y2) = scene.pixel_box(&shape.bbox);
        let (w, h) = (x2 - x1, y2 - y1);
        if w == 0 || h == 0 {
            continue;
        }
        let rgb = shape.color.rgb();
        let mask = shape_mask(shape.kind, w, h);
        for row in y1..y2 {
            for col in x1..x2 {
                if mask[(row - y1) * w + (col - x1)] {
                    img.set(row, col, rgb);
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let cfg = SceneConfig::default();
        assert_eq!(generate_scene(42, &cfg).unwrap(), generate_scene(42, &cfg).unwrap());
        assert_ne!(generate_scene(42, &cfg).unwrap(), generate_scene(43, &cfg).unwrap());
    }

    #[test]
    fn max_shapes_one() {
        let cfg = SceneConfig { max_shapes: 1, ..Default::default() };
        for seed in 0..50 {
            assert_eq!(generate_scene(seed, &cfg).unwrap().shapes.len(), 1);
        }
    }

    #[test]
    fn constraints_hold_over_a_thousand_seeds() {
        let cfg = SceneConfig::default();
        for seed in 0..1000 {
            let s = generate_scene(seed, &cfg).unwrap();
            assert!((1..=4).contains(&s.shapes.len()));
            for (i, a) in s.shapes.iter().enumerate() {
                assert!(a.bbox.area() >= cfg.min_area - 1e-12);
                for b in &s.shapes[i + 1..] {
                    // brute-force pixel IoU
                    let pa = s.pixel_box(&a.bbox);
                    let pb = s.pixel_box(&b.bbox);
                    let mut inter = 0usize;
                    for r in 0..64 {
                        for c in 0..64 {
                            let ina = c >= pa.0 && c < pa.2 && r >= pa.1 && r < pa.3;
                            let inb = c >= pb.0 && c < pb.2 && r >= pb.1 && r < pb.3;
                            inter += usize::from(ina && inb);
                        }
                    }
                    let union = (pa.2 - pa.0) * (pa.3 - pa.1) + (pb.2 - pb.0) * (pb.3 - pb.1) - inter;
                    assert!(inter as f64 / union as f64 <= cfg.max_iou);
                }
            }
        }
    }

    #[test]
    fn unsatisfiable_config_fails() {
        let cfg = SceneConfig {
            min_shapes: 4,
            max_shapes: 4,
            min_side_px: 32,
            max_side_px: 32,
            max_attempts: 50,
            ..Default::default()
        };
        // four 32px boxes with a 1px gap cannot tile a 64px canvas
        assert!(matches!(generate_scene(1, &cfg), Err(SceneError::Unsatisfiable { .. })));
        assert!(SceneConfig { min_shapes: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn empty_region_is_background() {
        let scene = SceneSpec {
            height: 16,
            width: 16,
            shapes: vec![ShapeInstance {
                kind: ShapeKind::Square,
                color: ShapeColor::Red,
                bbox: NormalizedBox::new(0.0, 0.0, 0.5, 0.5).unwrap(),
            }],
            seed: 0,
        };
        let img = render(&scene);
        let bg = BACKGROUND_RGB.map(|c| c as f32 / 255.0);
        for r in 8..16 {
            for c in 0..16 {
                assert_eq!(img.get(r, c), bg);
            }
        }
        assert_eq!(img.get(0, 0), ShapeColor::Red.rgb());
    }

    #[test]
    fn full_canvas_square_covers_canvas() {
        let scene = SceneSpec {
            height: 64,
            width: 64,
            shapes: vec![ShapeInstance {
                kind: ShapeKind::Square,
                color: ShapeColor::Blue,
                bbox: NormalizedBox::full(),
            }],
            seed: 0,
        };
        let img = render(&scene);
        let count = (0..64).flat_map(|r| (0..64).map(move |c| (r, c))).filter(|&(r, c)| img.get(r, c) == ShapeColor::Blue.rgb()).count();
        assert!(count as f64 >= 0.95 * 4096.0);
    }

    /// Flood-fill oracle: the tight box of each shape's connected pixels.
    fn component_box(img: &RasterImage, seed: (usize, usize), rgb: [f32; 3]) -> (usize, usize, usize, usize) {
        let (h, w) = (img.height(), img.width());
        let mut seen = vec![false; h * w];
        let mut stack = vec![seed];
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        while let Some((r, c)) = stack.pop() {
            if seen[r * w + c] || img.get(r, c) != rgb {
                continue;
            }
            seen[r * w + c] = true;
            x1 = x1.min(c);
            y1 = y1.min(r);
            x2 = x2.max(c + 1);
            y2 = y2.max(r + 1);
            if r > 0 {
                stack.push((r - 1, c));
            }
            if r + 1 < h {
                stack.push((r + 1, c));
            }
            if c > 0 {
                stack.push((r, c - 1));
            }
            if c + 1 < w {
                stack.push((r, c + 1));
            }
        }
        (x1, y1, x2, y2)
    }

    #[test]
    fn tight_boxes_match_spec_boxes() {
        let cfg = SceneConfig::default();
        for seed in 0..100 {
            let scene = generate_scene(seed, &cfg).unwrap();
            let img = render(&scene);
            for s in &scene.shapes {
                let (x1, y1, x2, y2) = scene.pixel_box(&s.bbox);
                // the bottom row of every shape is painted; start the fill there
                let start = (y2 - 1, (x1 + x2) / 2);
                let got = component_box(&img, start, s.color.rgb());
                for (a, b) in [(got.0, x1), (got.1, y1), (got.2, x2), (got.3, y2)] {
                    assert!(a.abs_diff(b) <= 1, "seed {seed} {:?}: {got:?} vs {:?}", s.kind, (x1, y1, x2, y2));
                }
            }
        }
    }
}
