use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::target::Target;

use super::ode::{dopri45, OdeOptions};
use super::Dataset;

/// `[P(0), Q(0), r, K, s, a, u, v]` used to generate the data.
pub const PREDPREY_TRUE_PARAMS: [f64; 8] = [50.0, 5.0, 0.6, 100.0, 1.2, 25.0, 0.5, 0.3];
pub const PREDPREY_NOISE_VAR: f64 = 10.0;
pub const PREDPREY_DATA_SEED: u64 = 20_140_502;
/// Box on the scaled parameters.
pub const PREDPREY_BOX: (f64, f64) = (0.001, 50.0);

/// Rates `[dP/dt, dQ/dt]`; `p` holds `[r, K, s, a, u, v]`.
pub fn predprey_rhs(state: [f64; 2], p: &[f64]) -> [f64; 2] {
    let [pp, q] = state;
    let [r, k, s, a, u, v] = [p[0], p[1], p[2], p[3], p[4], p[5]];
    let f = pp * q / (a + pp);
    [r * pp * (1.0 - pp / k) - s * f, u * f - v * q]
}

/// Interior fixed point `(P_f, Q_f)` when `u > v`.
pub fn predprey_fixed_point(p: &[f64]) -> Option<[f64; 2]> {
    let [r, k, s, a, u, v] = [p[0], p[1], p[2], p[3], p[4], p[5]];
    if !(u > v) {
        return None;
    }
    let pf = a * v / (u - v);
    let qf = r * (1.0 - pf / k) * (a + pf) / s;
    Some([pf, qf])
}

/// Jacobian of the rates, row-major.
pub fn predprey_jacobian(state: [f64; 2], p: &[f64]) -> [[f64; 2]; 2] {
    let [pp, q] = state;
    let [r, k, s, a, u, v] = [p[0], p[1], p[2], p[3], p[4], p[5]];
    let d = a + pp;
    [
        [r * (1.0 - 2.0 * pp / k) - s * q * a / (d * d), -s * pp / d],
        [u * q * a / (d * d), u * pp / d - v],
    ]
}

/// True when the interior fixed point is positive and both Jacobian
/// eigenvalues there have non-negative real part, with a real part that
/// vanishes up to rounding counted as admissible.
pub fn predprey_is_cyclic(p: &[f64]) -> bool {
    let Some([pf, qf]) = predprey_fixed_point(p) else {
        return false;
    };
    if !(pf > 0.0 && qf > 0.0) || !pf.is_finite() || !qf.is_finite() {
        return false;
    }
    let [r, k, s, a, u, v] = [p[0], p[1], p[2], p[3], p[4], p[5]];
    let d = a + pf;
    let terms = [r * (1.0 - 2.0 * pf / k), -s * qf * a / (d * d), u * pf / d, -v];
    let trace: f64 = terms.iter().sum();
    let scale: f64 = terms.iter().map(|t| t.abs()).sum();
    let j = predprey_jacobian([pf, qf], p);
    let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
    det > 0.0 && trace >= -1e-12 * scale
}

/// Five observation times evenly spaced on `[0, 50]`.
pub fn predprey_times() -> Vec<f64> {
    (0..5).map(|i| 12.5 * i as f64).collect()
}

/// Solves the model for `params = [P0, Q0, r, K, s, a, u, v]`.
pub fn predprey_solve(params: &[f64], times: &[f64], opts: &OdeOptions) -> Result<Vec<Vec<f64>>> {
    let rates = &params[2..8];
    dopri45(
        |_, y, dy| {
            let f = predprey_rhs([y[0], y[1]], rates);
            dy[0] = f[0];
            dy[1] = f[1];
        },
        0.0,
        &params[..2],
        times,
        opts,
    )
}

pub fn synthesize_predprey(seed: u64, noise_var: f64) -> Result<Dataset> {
    let times = predprey_times();
    let clean = predprey_solve(&PREDPREY_TRUE_PARAMS, &times, &OdeOptions::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_var.sqrt()).expect("finite variance");
    let values = clean
        .into_iter()
        .map(|y| {
            y.into_iter()
                .map(|v| {
                    let e: f64 = noise.sample(&mut rng);
                    v + if noise_var > 0.0 { e } else { 0.0 }
                })
                .collect()
        })
        .collect();
    Ok(Dataset {
        names: vec!["P".into(), "Q".into()],
        times,
        values,
    })
}

/// Posterior over parameters scaled by the true values, with a uniform prior
/// on the box intersected with the cyclic region.
#[derive(Debug, Clone)]
pub struct PredPreyTarget {
    times: Vec<f64>,
    data: Vec<Vec<f64>>,
    noise_var: f64,
    opts: OdeOptions,
}

impl PredPreyTarget {
    pub fn new(data: &Dataset, noise_var: f64) -> Result<Self> {
        if data.values.iter().any(|v| v.len() != 2) || data.times.is_empty() || !(noise_var > 0.0) {
            return Err(Error::InvalidArgument("predator-prey data needs (P, Q) rows and positive noise".into()));
        }
        Ok(PredPreyTarget {
            times: data.times.clone(),
            data: data.values.clone(),
            noise_var,
            opts: OdeOptions::default(),
        })
    }

    pub fn standard() -> Self {
        let d = synthesize_predprey(PREDPREY_DATA_SEED, PREDPREY_NOISE_VAR).expect("true parameters integrate");
        PredPreyTarget::new(&d, PREDPREY_NOISE_VAR).expect("valid dataset")
    }

    pub fn with_ode_options(mut self, opts: OdeOptions) -> Self {
        self.opts = opts;
        self
    }

    /// Unscaled parameters.
    pub fn params(theta: &[f64]) -> Vec<f64> {
        theta.iter().zip(&PREDPREY_TRUE_PARAMS).map(|(t, p)| t * p).collect()
    }

    pub fn in_support(theta: &[f64]) -> bool {
        let (lo, hi) = PREDPREY_BOX;
        theta.len() == 8 && theta.iter().all(|t| (lo..=hi).contains(t)) && predprey_is_cyclic(&Self::params(theta)[2..])
    }
}

impl Target for PredPreyTarget {
    fn dim(&self) -> usize {
        8
    }

    fn log_density(&self, theta: &[f64]) -> f64 {
        if !Self::in_support(theta) {
            return f64::NEG_INFINITY;
        }
        match predprey_solve(&Self::params(theta), &self.times, &self.opts) {
            Ok(ys) => {
                let ss: f64 = ys
                    .iter()
                    .zip(&self.data)
                    .flat_map(|(y, d)| y.iter().zip(d).map(|(a, b)| (a - b) * (a - b)))
                    .sum();
                -ss / (2.0 * self.noise_var)
            }
            Err(e) => {
                warn!("predator-prey integration failed at {theta:?}: {e}");
                f64::NEG_INFINITY
            }
        }
    }
}
