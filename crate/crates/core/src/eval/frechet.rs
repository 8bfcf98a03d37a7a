use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::EvalError;

/// Diagonal added to every fitted covariance.
pub const COV_REGULARIZATION: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `d x d`.
    pub cov: Vec<f64>,
    pub dim: usize,
    pub samples: usize,
}

impl GaussianStats {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self, EvalError> {
        let dim = mean.len();
        if cov.len() != dim * dim {
            return Err(EvalError::Dimension(format!("covariance has {} entries for dimension {dim}", cov.len())));
        }
        Ok(Self { mean, cov, dim, samples: 0 })
    }

    /// Sample mean and unbiased covariance plus the diagonal regularizer.
    pub fn fit(features: &[Vec<f64>]) -> Result<Self, EvalError> {
        let n = features.len();
        let dim = features.first().map_or(0, Vec::len);
        if n < 2 || dim == 0 {
            return Err(EvalError::InsufficientSamples { got: n, min: 2 });
        }
        if features.iter().any(|f| f.len() != dim) {
            return Err(EvalError::Dimension("feature vectors differ in length".into()));
        }
        let x = DMatrix::from_fn(n, dim, |i, j| features[i][j]);
        let mean = x.row_mean();
        let centered = DMatrix::from_fn(n, dim, |i, j| x[(i, j)] - mean[j]);
        let mut cov = centered.transpose() * &centered / (n - 1) as f64;
        cov = (&cov + cov.transpose()) * 0.5;
        for i in 0..dim {
            cov[(i, i)] += COV_REGULARIZATION;
        }
        Ok(Self {
            mean: mean.iter().copied().collect(),
            cov: (0..dim).flat_map(|i| (0..dim).map(move |j| (i, j))).map(|(i, j)| cov[(i, j)]).collect(),
            dim,
            samples: n,
        })
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.cov)
    }
}

/// Square root of a symmetric PSD matrix; negative eigenvalues clamp to zero.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&v| v.max(0.0).sqrt()));
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)`, clamped at 0.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64, EvalError> {
    if a.dim != b.dim {
        return Err(EvalError::Dimension(format!("{} vs {}", a.dim, b.dim)));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let (sa, sb) = (a.cov_matrix(), b.cov_matrix());
    let ra = sqrt_psd(&sa);
    let cross = sqrt_psd(&(&ra * &sb * &ra));
    let d = mean_term + sa.trace() + sb.trace() - 2.0 * cross.trace();
    if !d.is_finite() {
        return Err(EvalError::NonFinite("frechet distance".into()));
    }
    Ok(d.max(0.0))
}
