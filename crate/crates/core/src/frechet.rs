//! Gaussian fits of feature sets and the Fréchet (2-Wasserstein) distance
//! between them.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{invalid, shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Ridge added to the covariance diagonal when there are fewer than `D + 1`
/// samples, relative to the mean variance.
const RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub count: usize,
}

impl GaussianSummary {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Mean and unbiased covariance of the rows of `features` (N, D).
pub fn fit_gaussian<T: Real>(features: &Tensor<T>) -> Result<GaussianSummary> {
    let (n, d) = match features.shape() {
        [n, d] => (*n, *d),
        s => return Err(shape_err("fit_gaussian", format!("expected (N, D), got {s:?}"))),
    };
    if n < 2 {
        return Err(invalid("fit_gaussian needs at least 2 samples"));
    }
    let x = DMatrix::from_row_slice(n, d, &features.to_f64_vec());
    let mean = x.row_mean().transpose();
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    cov = (&cov + cov.transpose()) * 0.5;
    if n < d + 1 {
        let scale = (cov.trace() / d as f64).max(1.0);
        for i in 0..d {
            cov[(i, i)] += RIDGE * scale;
        }
    }
    Ok(GaussianSummary {
        mean,
        covariance: cov,
        count: n,
    })
}

/// Symmetric PSD square root with negative eigenvalues clamped to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)`,
/// clamped at zero.
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(shape_err("frechet_distance", format!("dimensions {} and {}", a.dim(), b.dim())));
    }
    let ra = psd_sqrt(&a.covariance);
    let inner = &ra * &b.covariance * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_root: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let dm = (&a.mean - &b.mean).norm_squared();
    Ok((dm + a.covariance.trace() + b.covariance.trace() - 2.0 * tr_root).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(mean: &[f64], cov: &[f64]) -> GaussianSummary {
        let d = mean.len();
        GaussianSummary {
            mean: DVector::from_column_slice(mean),
            covariance: DMatrix::from_row_slice(d, d, cov),
            count: 100,
        }
    }

    #[test]
    fn one_dimensional_closed_form() {
        let a = summary(&[1.5], &[4.0]);
        let b = summary(&[-0.5], &[0.25]);
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - (4.0 + 1.5f64.powi(2))).abs() < 1e-12);
    }

    #[test]
    fn identical_summaries_are_at_distance_zero() {
        let a = summary(&[0.1, 0.2, 0.3], &[2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.5]);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-8);
    }

    #[test]
    fn fit_matches_hand_moments() {
        let f = Tensor::<f64>::from_f64(&[3, 2], &[1.0, 2.0, 3.0, 2.0, 5.0, 8.0]).unwrap();
        let g = fit_gaussian(&f).unwrap();
        assert_eq!(g.mean.as_slice(), &[3.0, 4.0]);
        // var x = (4 + 0 + 4) / 2, var y = (4 + 4 + 16) / 2, cov = (4 + 0 + 8) / 2
        assert!((g.covariance[(0, 0)] - 4.0).abs() < 1e-12);
        assert!((g.covariance[(1, 1)] - 12.0).abs() < 1e-12);
        assert!((g.covariance[(0, 1)] - 6.0).abs() < 1e-12);
        assert!(fit_gaussian(&Tensor::<f64>::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = summary(&[0.0], &[1.0]);
        let b = summary(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
        assert!(frechet_distance(&a, &b).is_err());
    }
}
