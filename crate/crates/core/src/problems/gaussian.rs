use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};
use crate::target::Target;

/// Multivariate normal `N(mean, cov)`.
#[derive(Debug, Clone)]
pub struct GaussianTarget {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    precision: DMatrix<f64>,
    log_norm: f64,
}

impl GaussianTarget {
    pub fn new(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> Result<Self> {
        let n = mean.len();
        if n == 0 || cov.len() != n || cov.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidArgument("covariance must be n x n for an n-vector mean".into()));
        }
        let cov = DMatrix::from_fn(n, n, |i, j| cov[i][j]);
        if (0..n).any(|i| (0..i).any(|j| cov[(i, j)] != cov[(j, i)])) {
            return Err(Error::InvalidArgument("covariance must be symmetric".into()));
        }
        let c = cov.clone().cholesky().ok_or(Error::Factorization)?;
        let chol = c.l();
        let precision = c.inverse();
        let log_det: f64 = 2.0 * (0..n).map(|i| chol[(i, i)].ln()).sum::<f64>();
        let log_norm = -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        Ok(GaussianTarget {
            mean: DVector::from_vec(mean),
            cov,
            chol,
            precision,
            log_norm,
        })
    }

    /// Two dimensions, unit variances, correlation 0.5.
    pub fn correlated_2d() -> Self {
        GaussianTarget::new(vec![0.0, 0.0], vec![vec![1.0, 0.5], vec![0.5, 1.0]]).expect("valid covariance")
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Lower Cholesky factor of the covariance.
    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z = DVector::from_fn(self.mean.len(), |_, _| StandardNormal.sample(rng));
        (&self.mean + &self.chol * z).as_slice().to_vec()
    }
}

impl Target for GaussianTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density(&self, theta: &[f64]) -> f64 {
        if check_dim(self.dim(), theta.len()).is_err() {
            return f64::NEG_INFINITY;
        }
        let d = DVector::from_column_slice(theta) - &self.mean;
        let w = self.chol.solve_lower_triangular(&d).expect("nonsingular factor");
        self.log_norm - 0.5 * w.norm_squared()
    }

    fn grad_log_density(&self, theta: &[f64]) -> Option<Vec<f64>> {
        let d = DVector::from_column_slice(theta) - &self.mean;
        Some((-(&self.precision * d)).as_slice().to_vec())
    }

    fn has_gradient(&self) -> bool {
        true
    }
}
