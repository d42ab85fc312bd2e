//! Dormand-Prince 5(4) embedded Runge-Kutta integrator with adaptive steps.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions {
            rtol: 1e-8,
            atol: 1e-10,
            max_steps: 100_000,
        }
    }
}

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Difference between the fifth- and fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Integrates `y' = f(t, y)` from `(t0, y0)` and returns the state at each
/// of the ascending times `t_out` (all `>= t0`).
pub fn dopri45<F>(mut f: F, t0: f64, y0: &[f64], t_out: &[f64], opts: &OdeOptions) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y0.len();
    if t_out.windows(2).any(|w| w[1] < w[0]) || t_out.first().is_some_and(|&t| t < t0) {
        return Err(Error::InvalidArgument("output times must be ascending and not before t0".into()));
    }
    let mut out = Vec::with_capacity(t_out.len());
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k = vec![vec![0.0; n]; 7];
    let mut tmp = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    f(t, &y, &mut k[0]);
    let t_end = t_out.last().copied().unwrap_or(t0);
    let mut h = initial_step(&y, &k[0], t_end - t0, opts);
    let mut steps = 0usize;
    for &target in t_out {
        while t < target {
            if steps >= opts.max_steps {
                return Err(Error::Integration {
                    t,
                    reason: "step limit reached",
                });
            }
            let last = t + h >= target;
            let step = if last { target - t } else { h };
            if step <= 1e-14 * t.abs().max(1.0) {
                return Err(Error::Integration {
                    t,
                    reason: "step size underflow",
                });
            }
            for s in 1..7 {
                for i in 0..n {
                    let mut acc = y[i];
                    for (j, kj) in k.iter().enumerate().take(s) {
                        acc += step * A[s][j] * kj[i];
                    }
                    tmp[i] = acc;
                }
                f(t + C[s] * step, &tmp, &mut k[s]);
            }
            // The seventh stage is evaluated at the fifth-order solution.
            y_new.copy_from_slice(&tmp);
            let mut err = 0.0;
            for i in 0..n {
                let mut e = 0.0;
                for (s, ks) in k.iter().enumerate() {
                    e += E[s] * ks[i];
                }
                let sc = opts.atol + opts.rtol * y[i].abs().max(y_new[i].abs());
                let r = step * e / sc;
                err += r * r;
            }
            let err = (err / n.max(1) as f64).sqrt();
            if !err.is_finite() {
                h = step * 0.2;
                steps += 1;
                continue;
            }
            let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            if err <= 1.0 {
                t = if last { target } else { t + step };
                y.copy_from_slice(&y_new);
                let k6 = k[6].clone();
                k[0].copy_from_slice(&k6);
                if !last || factor < 1.0 {
                    h = step * factor;
                }
            } else {
                h = step * factor.min(1.0);
            }
            steps += 1;
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration {
                t,
                reason: "non-finite state",
            });
        }
        out.push(y.clone());
    }
    Ok(out)
}

fn initial_step(y: &[f64], dy: &[f64], span: f64, opts: &OdeOptions) -> f64 {
    let mut d0 = 0.0;
    let mut d1 = 0.0;
    for (a, b) in y.iter().zip(dy) {
        let sc = opts.atol + opts.rtol * a.abs();
        d0 += (a / sc).powi(2);
        d1 += (b / sc).powi(2);
    }
    let (d0, d1) = (d0.sqrt(), d1.sqrt());
    let h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    if span > 0.0 {
        h.min(span)
    } else {
        h.max(1e-6)
    }
}
