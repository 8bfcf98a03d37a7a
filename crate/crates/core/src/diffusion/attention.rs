use serde::{Deserialize, Serialize};

use super::DiffusionError;

/// Head-averaged cross-attention of one block: row-major `(height*width, n_keys)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockAttention {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub n_keys: usize,
    pub weights: Vec<f32>,
}

impl BlockAttention {
    pub fn row(&self, pixel: usize) -> &[f32] {
        &self.weights[pixel * self.n_keys..(pixel + 1) * self.n_keys]
    }

    /// Largest deviation of a row sum from 1.
    pub fn max_row_error(&self) -> f64 {
        (0..self.height * self.width)
            .map(|p| (self.row(p).iter().map(|&w| w as f64).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepAttention {
    pub t: f64,
    pub blocks: Vec<BlockAttention>,
}

/// Attention captured during sampling, keyed by the non-padding tokens.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub steps: Vec<StepAttention>,
    /// Rendered label of each key token, in sequence order.
    pub tokens: Vec<String>,
}

impl AttentionRecord {
    pub fn is_empty(&self) -> bool {
        self.steps.iter().all(|s| s.blocks.is_empty())
    }

    pub fn max_row_error(&self) -> f64 {
        self.steps.iter().flat_map(|s| &s.blocks).map(|b| b.max_row_error()).fold(0.0, f64::max)
    }
}

/// Mean attention map per selected key over every step and block, upsampled
/// by nearest neighbour to `height x width`. Maps are row-major.
pub fn average_attention(
    rec: &AttentionRecord,
    keys: &[usize],
    height: usize,
    width: usize,
) -> Result<Vec<Vec<f64>>, DiffusionError> {
    let blocks: Vec<&BlockAttention> = rec.steps.iter().flat_map(|s| &s.blocks).collect();
    if blocks.is_empty() {
        return Err(DiffusionError::Attention("empty attention record".into()));
    }
    let mut maps = vec![vec![0.0f64; height * width]; keys.len()];
    for b in &blocks {
        if let Some(&k) = keys.iter().find(|&&k| k >= b.n_keys) {
            return Err(DiffusionError::Attention(format!("key {k} outside block {} with {} keys", b.name, b.n_keys)));
        }
        for r in 0..height {
            let sr = r * b.height / height;
            for c in 0..width {
                let row = b.row(sr * b.width + c * b.width / width);
                for (m, &k) in maps.iter_mut().zip(keys) {
                    m[r * width + c] += row[k] as f64;
                }
            }
        }
    }
    let n = blocks.len() as f64;
    for m in &mut maps {
        for v in m.iter_mut() {
            *v /= n;
        }
    }
    Ok(maps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(h: usize, w: usize, keys: usize, f: impl Fn(usize, usize) -> f32) -> BlockAttention {
        let weights = (0..h * w).flat_map(|p| (0..keys).map(move |k| (p, k))).map(|(p, k)| f(p, k)).collect();
        BlockAttention { name: "b".into(), height: h, width: w, n_keys: keys, weights }
    }

    #[test]
    fn single_block_is_upsampled_copy() {
        let b = block(2, 2, 2, |p, k| if k == 0 { p as f32 / 10.0 } else { 1.0 - p as f32 / 10.0 });
        let rec = AttentionRecord { steps: vec![StepAttention { t: 1.0, blocks: vec![b] }], tokens: vec![] };
        let m = average_attention(&rec, &[0], 4, 4).unwrap();
        assert_eq!(m[0][0], 0.0);
        assert!((m[0][3] - 0.1).abs() < 1e-7);
        assert!((m[0][15] - 0.3).abs() < 1e-7);
    }

    #[test]
    fn uniform_attention_gives_constant_map() {
        let steps = (0..3)
            .map(|i| StepAttention { t: i as f64, blocks: vec![block(4, 4, 4, |_, _| 0.25), block(2, 2, 4, |_, _| 0.25)] })
            .collect();
        let rec = AttentionRecord { steps, tokens: vec![] };
        assert!(rec.max_row_error() < 1e-6);
        for m in average_attention(&rec, &[0, 3], 8, 8).unwrap() {
            assert!(m.iter().all(|&v| (v - 0.25).abs() < 1e-7));
        }
    }

    #[test]
    fn step_order_does_not_matter() {
        let mk = |s: f32| StepAttention { t: s as f64, blocks: vec![block(2, 2, 3, |p, k| (p + k) as f32 * s)] };
        let a = AttentionRecord { steps: vec![mk(1.0), mk(2.0), mk(3.0)], tokens: vec![] };
        let b = AttentionRecord { steps: vec![mk(3.0), mk(1.0), mk(2.0)], tokens: vec![] };
        assert_eq!(average_attention(&a, &[0, 1, 2], 2, 2).unwrap(), average_attention(&b, &[0, 1, 2], 2, 2).unwrap());
    }

    #[test]
    fn empty_record_errors() {
        assert!(average_attention(&AttentionRecord::default(), &[0], 2, 2).is_err());
    }
}
