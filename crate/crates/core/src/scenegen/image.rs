use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::coords::NormalizedBox;

/// Row-major `H×W×3` image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RasterImage {
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self { height, width, data }
    }

    /// Wraps HWC data. Values are clamped into `[0, 1]`; non-finite values become 0.
    pub fn from_hwc(height: usize, width: usize, mut data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width * 3, "HWC buffer size");
        for v in &mut data {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        }
        Self { height, width, data }
    }

    /// From a `3×H×W` channel-first buffer.
    pub fn from_chw(height: usize, width: usize, chw: &[f32]) -> Self {
        assert_eq!(chw.len(), height * width * 3, "CHW buffer size");
        let plane = height * width;
        let mut data = Vec::with_capacity(plane * 3);
        for i in 0..plane {
            for c in 0..3 {
                data.push(chw[c * plane + i]);
            }
        }
        Self::from_hwc(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * 3];
        for i in 0..plane {
            for c in 0..3 {
                out[c * plane + i] = self.data[i * 3 + c];
            }
        }
        out
    }

    pub fn is_valid(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    pub fn to_rgb8(&self) -> RgbImage {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let [r, g, b] = self.get(y as usize, x as usize);
            Rgb([to_u8(r), to_u8(g), to_u8(b)])
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.pixels().flat_map(|p| p.0.map(|c| c as f32 / 255.0)).collect();
        Self { height: h, width: w, data }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> image::ImageResult<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)
    }

    pub fn png_bytes(&self) -> image::ImageResult<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn load_png(path: impl AsRef<Path>) -> image::ImageResult<Self> {
        Ok(Self::from_rgb8(&image::open(path)?.to_rgb8()))
    }

    /// Pixel-aligned crop covering the box (rounded to the nearest pixel edges).
    pub fn crop(&self, b: &NormalizedBox) -> RasterImage {
        let (x1, y1, x2, y2) = super::pixel_box(b, self.width, self.height);
        let (x2, y2) = (x2.max(x1 + 1).min(self.width), y2.max(y1 + 1).min(self.height));
        let x1 = x1.min(x2 - 1);
        let y1 = y1.min(y2 - 1);
        let mut data = Vec::with_capacity((x2 - x1) * (y2 - y1) * 3);
        for r in y1..y2 {
            for c in x1..x2 {
                data.extend_from_slice(&self.get(r, c));
            }
        }
        Self { height: y2 - y1, width: x2 - x1, data }
    }

    /// Bilinear resampling with pixel-centre alignment.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> RasterImage {
        let mut data = Vec::with_capacity(height * width * 3);
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        for r in 0..height {
            let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = (fy - y0 as f64) as f32;
            for c in 0..width {
                let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = (fx - x0 as f64) as f32;
                let (a, b, cc, d) = (self.get(y0, x0), self.get(y0, x1), self.get(y1, x0), self.get(y1, x1));
                for ch in 0..3 {
                    let top = a[ch] * (1.0 - wx) + b[ch] * wx;
                    let bot = cc[ch] * (1.0 - wx) + d[ch] * wx;
                    data.push(top * (1.0 - wy) + bot * wy);
                }
            }
        }
        Self { height, width, data }
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
