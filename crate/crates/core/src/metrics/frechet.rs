//! Gaussian feature statistics and the Fréchet distance between them.

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::backbone::FeatureExtractor;
use crate::error::invalid;
use crate::{Error, Result};

const JITTER: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    /// Unbiased sample covariance.
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl FeatureStats {
    /// Stats of `n` feature rows of dimension `d`, given row-major.
    pub fn from_rows(rows: &[f64], n: usize, d: usize) -> Result<Self> {
        if n < 2 {
            return Err(invalid!("feature statistics need at least 2 samples, got {n}"));
        }
        if rows.len() != n * d {
            return Err(invalid!("expected {}x{} features, got {} values", n, d, rows.len()));
        }
        let m = DMatrix::from_row_slice(n, d, rows);
        let mean = m.row_mean().transpose();
        let mut centered = m;
        for mut r in centered.row_iter_mut() {
            r -= mean.transpose();
        }
        let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
        // Exact symmetry despite accumulation order.
        cov = (&cov + cov.transpose()) * 0.5;
        Ok(Self { mean, cov, count: n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Pooled-feature statistics of `images`, extracted in chunks of `batch`.
pub fn feature_stats(extractor: &dyn FeatureExtractor, images: &Tensor, batch: usize) -> Result<FeatureStats> {
    let n = images.dim(0)?;
    if n < 2 {
        return Err(invalid!("feature statistics need at least 2 samples, got {n}"));
    }
    let mut rows = Vec::new();
    let mut d = 0;
    let mut start = 0;
    while start < n {
        let len = batch.max(1).min(n - start);
        let f = extractor.pooled(&images.narrow(0, start, len)?)?;
        d = f.dim(1)?;
        rows.extend(f.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?);
        start += len;
    }
    FeatureStats::from_rows(&rows, n, d)
}

fn psd_sqrt(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let eig = SymmetricEigen::try_new(m.clone(), 1e-12, 10_000)?;
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if eig.eigenvalues.iter().any(|v| !v.is_finite() || *v < -1e-6 * scale) {
        return None;
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Some(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `tr((A^1/2 B A^1/2)^1/2)`, which equals `tr((AB)^1/2)` for PSD `A`, `B`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<f64> {
    let ra = psd_sqrt(a)?;
    let mut m = &ra * b * &ra;
    m = (&m + m.transpose()) * 0.5;
    Some(psd_sqrt(&m)?.trace())
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^1/2)`, clamped at zero.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(invalid!("feature dimensions differ: {} vs {}", a.dim(), b.dim()));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let tr = a.cov.trace() + b.cov.trace();
    let cross = match trace_sqrt_product(&a.cov, &b.cov) {
        Some(v) => v,
        None => {
            log::warn!("matrix square root failed; retrying with {JITTER} diagonal jitter");
            let eye = DMatrix::<f64>::identity(a.dim(), a.dim()) * JITTER;
            let c = trace_sqrt_product(&(&a.cov + &eye), &(&b.cov + &eye))
                .ok_or_else(|| Error::NumericalFailure("matrix square root did not converge".into()))?;
            c - a.dim() as f64 * JITTER
        }
    };
    let d = diff + tr - 2.0 * cross;
    if !d.is_finite() {
        return Err(Error::NumericalFailure(format!("Fréchet distance is {d}")));
    }
    Ok(d.max(0.0))
}
