use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::target::Target;

use super::Dataset;

/// Seed of the bundled synthetic dataset.
pub const BOD_DATA_SEED: u64 = 20_140_501;
pub const BOD_NOISE_VAR: f64 = 2e-4;
pub const BOD_TRUE_PARAMS: [f64; 2] = [1.0, 0.1];

/// `B(t) = theta_0 (1 - exp(-theta_1 t))`.
pub fn bod_model(theta: &[f64], t: f64) -> f64 {
    theta[0] * (1.0 - (-theta[1] * t).exp())
}

/// 20 evenly spaced times on `[1, 5]`.
pub fn bod_times() -> Vec<f64> {
    (0..20).map(|i| 1.0 + 4.0 * i as f64 / 19.0).collect()
}

/// Model output at the true parameters plus `N(0, noise_var)` noise.
pub fn synthesize_bod(seed: u64, noise_var: f64) -> Dataset {
    let times = bod_times();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_var.sqrt()).expect("finite variance");
    let values = times
        .iter()
        .map(|&t| {
            let e: f64 = noise.sample(&mut rng);
            vec![bod_model(&BOD_TRUE_PARAMS, t) + if noise_var > 0.0 { e } else { 0.0 }]
        })
        .collect();
    Dataset {
        names: vec!["B".into()],
        times,
        values,
    }
}

/// BOD posterior under a flat prior and Gaussian noise.
#[derive(Debug, Clone)]
pub struct BodTarget {
    times: Vec<f64>,
    data: Vec<f64>,
    noise_var: f64,
}

impl BodTarget {
    pub fn new(times: Vec<f64>, data: Vec<f64>, noise_var: f64) -> Result<Self> {
        if times.len() != data.len() || times.is_empty() || !(noise_var > 0.0) {
            return Err(Error::InvalidArgument("BOD needs matching times and data and positive noise".into()));
        }
        Ok(BodTarget { times, data, noise_var })
    }

    pub fn from_dataset(d: &Dataset, noise_var: f64) -> Result<Self> {
        BodTarget::new(d.times.clone(), d.values.iter().map(|v| v[0]).collect(), noise_var)
    }

    /// The bundled dataset.
    pub fn standard() -> Self {
        BodTarget::from_dataset(&synthesize_bod(BOD_DATA_SEED, BOD_NOISE_VAR), BOD_NOISE_VAR).expect("valid dataset")
    }

    pub fn residuals(&self, theta: &[f64]) -> Vec<f64> {
        self.times.iter().zip(&self.data).map(|(&t, y)| bod_model(theta, t) - y).collect()
    }

    /// Posterior mode by damped Gauss-Newton from the true parameters.
    pub fn mode(&self) -> Vec<f64> {
        let mut th = BOD_TRUE_PARAMS.to_vec();
        let mut ss = self.sum_sq(&th);
        for _ in 0..100 {
            let (mut a, mut g) = ([[0.0; 2]; 2], [0.0; 2]);
            for (&t, y) in self.times.iter().zip(&self.data) {
                let e = (-th[1] * t).exp();
                let j = [1.0 - e, th[0] * t * e];
                let r = bod_model(&th, t) - y;
                for p in 0..2 {
                    g[p] += j[p] * r;
                    for q in 0..2 {
                        a[p][q] += j[p] * j[q];
                    }
                }
            }
            let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
            if det == 0.0 {
                break;
            }
            let d = [
                -(a[1][1] * g[0] - a[0][1] * g[1]) / det,
                -(a[0][0] * g[1] - a[1][0] * g[0]) / det,
            ];
            let mut step = 1.0;
            let mut improved = false;
            while step > 1e-10 {
                let cand = vec![th[0] + step * d[0], th[1] + step * d[1]];
                let cs = self.sum_sq(&cand);
                if cs < ss {
                    th = cand;
                    ss = cs;
                    improved = true;
                    break;
                }
                step *= 0.5;
            }
            if !improved || d[0].abs() + d[1].abs() < 1e-14 {
                break;
            }
        }
        th
    }

    fn sum_sq(&self, theta: &[f64]) -> f64 {
        self.residuals(theta).iter().map(|r| r * r).sum()
    }
}

impl Target for BodTarget {
    fn dim(&self) -> usize {
        2
    }

    fn log_density(&self, theta: &[f64]) -> f64 {
        -self.sum_sq(theta) / (2.0 * self.noise_var)
    }

    fn grad_log_density(&self, theta: &[f64]) -> Option<Vec<f64>> {
        let mut g = vec![0.0; 2];
        for (&t, y) in self.times.iter().zip(&self.data) {
            let e = (-theta[1] * t).exp();
            let r = theta[0] * (1.0 - e) - y;
            g[0] -= r * (1.0 - e) / self.noise_var;
            g[1] -= r * theta[0] * t * e / self.noise_var;
        }
        Some(g)
    }

    fn has_gradient(&self) -> bool {
        true
    }
}
