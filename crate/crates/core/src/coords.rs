//! Uniform quantization of normalized image coordinates into position-token bins.
//!
//! Bins are grid points `b / (n_bins - 1)`, so both canvas edges are
//! representable exactly. Rounding is half-away-from-zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CoordError {
    #[error("coordinate {0} is outside [0, 1]")]
    OutOfRange(f64),
    #[error("bin index {index} out of range for {n_bins} bins")]
    BinOutOfRange { index: usize, n_bins: usize },
    #[error("n_bins must be at least 2, got {0}")]
    TooFewBins(usize),
    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): need x1 < x2 and y1 < y2")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("degenerate region: box quantizes to bins {bins:?}")]
    DegenerateRegion { bins: [usize; 4] },
}

/// A coordinate expressed as a fraction of the image width or height.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct NormalizedCoord(f64);

impl NormalizedCoord {
    pub fn new(value: f64) -> Result<Self, CoordError> {
        if (0.0..=1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(CoordError::OutOfRange(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for NormalizedCoord {
    type Error = CoordError;

    fn try_from(value: f64) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<NormalizedCoord> for f64 {
    fn from(c: NormalizedCoord) -> f64 {
        c.0
    }
}

/// Axis-aligned box in normalized coordinates, top-left then bottom-right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct NormalizedBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl NormalizedBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, CoordError> {
        for v in [x1, y1, x2, y2] {
            NormalizedCoord::new(v)?;
        }
        if !(x1 < x2 && y1 < y2) {
            return Err(CoordError::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// The whole canvas.
    pub fn full() -> Self {
        Self { x1: 0.0, y1: 0.0, x2: 1.0, y2: 1.0 }
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn intersection_area(&self, other: &Self) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &Self) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

impl TryFrom<[f64; 4]> for NormalizedBox {
    type Error = CoordError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<NormalizedBox> for [f64; 4] {
    fn from(b: NormalizedBox) -> [f64; 4] {
        b.to_array()
    }
}

/// Index of a position-token bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BinIndex(usize);

impl BinIndex {
    pub fn new(index: usize, cfg: &QuantizerConfig) -> Result<Self, CoordError> {
        if index < cfg.n_bins() {
            Ok(Self(index))
        } else {
            Err(CoordError::BinOutOfRange { index, n_bins: cfg.n_bins() })
        }
    }

    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "QuantizerConfigRepr", into = "QuantizerConfigRepr")]
pub struct QuantizerConfig {
    n_bins: usize,
}

#[derive(Serialize, Deserialize)]
struct QuantizerConfigRepr {
    n_bins: usize,
}

impl TryFrom<QuantizerConfigRepr> for QuantizerConfig {
    type Error = CoordError;

    fn try_from(r: QuantizerConfigRepr) -> Result<Self, Self::Error> {
        Self::new(r.n_bins)
    }
}

impl From<QuantizerConfig> for QuantizerConfigRepr {
    fn from(c: QuantizerConfig) -> Self {
        Self { n_bins: c.n_bins }
    }
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self { n_bins: 1000 }
    }
}

impl QuantizerConfig {
    pub fn new(n_bins: usize) -> Result<Self, CoordError> {
        if n_bins < 2 {
            return Err(CoordError::TooFewBins(n_bins));
        }
        Ok(Self { n_bins })
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    /// Largest distance between a coordinate and its reconstruction.
    pub fn max_roundtrip_error(&self) -> f64 {
        1.0 / (2.0 * (self.n_bins - 1) as f64)
    }
}

/// Nearest grid bin of a coordinate in `[0, 1]`.
pub fn quantize(c: f64, cfg: &QuantizerConfig) -> Result<BinIndex, CoordError> {
    let c = NormalizedCoord::new(c)?;
    let last = (cfg.n_bins - 1) as f64;
    // f64::round is half-away-from-zero
    let idx = (c.value() * last).round().clamp(0.0, last) as usize;
    Ok(BinIndex(idx))
}

pub fn dequantize(b: BinIndex, cfg: &QuantizerConfig) -> Result<f64, CoordError> {
    if b.0 >= cfg.n_bins {
        return Err(CoordError::BinOutOfRange { index: b.0, n_bins: cfg.n_bins });
    }
    Ok(b.0 as f64 / (cfg.n_bins - 1) as f64)
}

/// Quantized corners in `x1, y1, x2, y2` order.
pub fn box_to_bins(bx: &NormalizedBox, cfg: &QuantizerConfig) -> Result<[BinIndex; 4], CoordError> {
    let bins = [
        quantize(bx.x1, cfg)?,
        quantize(bx.y1, cfg)?,
        quantize(bx.x2, cfg)?,
        quantize(bx.y2, cfg)?,
    ];
    if bins[0] >= bins[2] || bins[1] >= bins[3] {
        return Err(CoordError::DegenerateRegion { bins: bins.map(|b| b.0) });
    }
    Ok(bins)
}

/// Box whose corners sit exactly on the given bins.
pub fn bins_to_box(bins: [usize; 4], cfg: &QuantizerConfig) -> Result<NormalizedBox, CoordError> {
    let mut v = [0.0; 4];
    for (slot, &b) in v.iter_mut().zip(bins.iter()) {
        *slot = dequantize(BinIndex(b), cfg)?;
    }
    if bins[0] >= bins[2] || bins[1] >= bins[3] {
        return Err(CoordError::DegenerateRegion { bins });
    }
    NormalizedBox::new(v[0], v[1], v[2], v[3])
}

/// Snap a box onto the bin grid.
pub fn snap_box(bx: &NormalizedBox, cfg: &QuantizerConfig) -> Result<NormalizedBox, CoordError> {
    let bins = box_to_bins(bx, cfg)?;
    bins_to_box(bins.map(|b| b.0), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> QuantizerConfig {
        QuantizerConfig::default()
    }

    #[test]
    fn endpoints() {
        assert_eq!(quantize(0.0, &cfg()).unwrap().index(), 0);
        assert_eq!(quantize(1.0, &cfg()).unwrap().index(), 999);
        assert_eq!(dequantize(BinIndex(0), &cfg()).unwrap(), 0.0);
        assert_eq!(dequantize(BinIndex(999), &cfg()).unwrap(), 1.0);
        assert!((dequantize(BinIndex(250), &cfg()).unwrap() - 250.0 / 999.0).abs() < 1e-15);
    }

    #[test]
    fn midpoint_tie_rounds_away_from_zero() {
        // 0.5 * 999 = 499.5 exactly; bins 499 and 500 are equidistant
        let b = quantize(0.5, &cfg()).unwrap().index();
        assert_eq!(b, 500);
        let best = (0..1000)
            .map(|i| (i as f64 / 999.0 - 0.5).abs())
            .fold(f64::INFINITY, f64::min);
        assert!(((b as f64 / 999.0) - 0.5).abs() <= best + 1e-15);
    }

    #[test]
    fn out_of_range_is_rejected() {
        assert!(matches!(quantize(-0.01, &cfg()), Err(CoordError::OutOfRange(_))));
        assert!(matches!(quantize(1.5, &cfg()), Err(CoordError::OutOfRange(_))));
        assert!(quantize(f64::NAN, &cfg()).is_err());
        assert!(matches!(
            dequantize(BinIndex(1000), &cfg()),
            Err(CoordError::BinOutOfRange { index: 1000, n_bins: 1000 })
        ));
        assert!(QuantizerConfig::new(1).is_err());
    }

    #[test]
    fn box_bins() {
        let full = box_to_bins(&NormalizedBox::full(), &cfg()).unwrap();
        assert_eq!(full.map(|b| b.index()), [0, 0, 999, 999]);

        let bx = NormalizedBox::new(0.1, 0.2, 0.5, 0.6).unwrap();
        let bins = box_to_bins(&bx, &cfg()).unwrap().map(|b| b.index());
        let scalar: Vec<usize> =
            [0.1f64, 0.2, 0.5, 0.6].iter().map(|c| (c * 999.0).round() as usize).collect();
        assert_eq!(bins.to_vec(), scalar);
        assert_eq!(bins, [100, 200, 500, 599]);

        let thin = NormalizedBox::new(0.4, 0.4, 0.4005, 0.5).unwrap();
        assert!(matches!(
            box_to_bins(&thin, &cfg()),
            Err(CoordError::DegenerateRegion { bins: [400, 400, 400, 500] })
        ));
    }

    #[test]
    fn dequantize_then_quantize_is_identity() {
        let c = cfg();
        for b in 0..c.n_bins() {
            let v = dequantize(BinIndex(b), &c).unwrap();
            assert_eq!(quantize(v, &c).unwrap().index(), b);
        }
    }

    proptest! {
        #[test]
        fn roundtrip_error_bounded(c in 0.0f64..=1.0, n in 2usize..5000) {
            let q = QuantizerConfig::new(n).unwrap();
            let back = dequantize(quantize(c, &q).unwrap(), &q).unwrap();
            prop_assert!((back - c).abs() <= q.max_roundtrip_error() + 1e-15);
        }

        #[test]
        fn monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize(lo, &cfg()).unwrap() <= quantize(hi, &cfg()).unwrap());
        }
    }
}
