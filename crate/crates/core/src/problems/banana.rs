use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::target::Target;

/// `theta_1 = sigma_1 z_1`, `theta_2 = z_2 - b (theta_1^2 - sigma_1^2)` for
/// standard normal `z`, so
/// `log pi = -theta_1^2 / (2 sigma_1^2) - (theta_2 + b (theta_1^2 - sigma_1^2))^2 / 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BananaTarget {
    pub b: f64,
    pub sigma1: f64,
}

impl Default for BananaTarget {
    fn default() -> Self {
        BananaTarget { b: 1.0, sigma1: 1.0 }
    }
}

impl BananaTarget {
    pub fn new(b: f64, sigma1: f64) -> Result<Self> {
        if !b.is_finite() || !(sigma1 > 0.0) || !sigma1.is_finite() {
            return Err(Error::InvalidArgument(format!("invalid banana parameters b={b}, sigma1={sigma1}")));
        }
        Ok(BananaTarget { b, sigma1 })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let z1: f64 = StandardNormal.sample(rng);
        let z2: f64 = StandardNormal.sample(rng);
        let t1 = self.sigma1 * z1;
        [t1, z2 - self.b * (t1 * t1 - self.sigma1 * self.sigma1)]
    }

    /// Analytic `Var[theta_2] = 1 + 2 b^2 sigma_1^4`.
    pub fn var_theta2(&self) -> f64 {
        1.0 + 2.0 * self.b * self.b * self.sigma1.powi(4)
    }

    fn shift(&self, t1: f64) -> f64 {
        self.b * (t1 * t1 - self.sigma1 * self.sigma1)
    }
}

impl Target for BananaTarget {
    fn dim(&self) -> usize {
        2
    }

    fn log_density(&self, t: &[f64]) -> f64 {
        let s = t[1] + self.shift(t[0]);
        -0.5 * t[0] * t[0] / (self.sigma1 * self.sigma1) - 0.5 * s * s
    }

    fn grad_log_density(&self, t: &[f64]) -> Option<Vec<f64>> {
        let s = t[1] + self.shift(t[0]);
        Some(vec![-t[0] / (self.sigma1 * self.sigma1) - 2.0 * self.b * t[0] * s, -s])
    }

    fn has_gradient(&self) -> bool {
        true
    }
}
