//! Reference-space proposals and the map-induced proposal densities.
//!
//! Proposals act on `r = T(theta)`. Because the map Jacobian cancels between
//! the target density and the induced proposal density, every acceptance
//! ratio can be written with the reference-space density
//! `log p~(r) = log pi(T^{-1}(r)) - log det DT(T^{-1}(r))`. The functions
//! [`mh_log_ratio`] and [`dr_stage2_log_ratio`] take plain log values so the
//! same formulas drive both the chain and discrete-state checks.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::target::Target;
use crate::transport_map::TriangularMap;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Reference proposal with its tuning parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ReferenceProposal {
    RandomWalk {
        sigma: f64,
    },
    Mala {
        dt: f64,
    },
    /// Independence `N(0, I)` first, then a random walk of scale `sigma2`.
    #[serde(rename = "dr-global")]
    DelayedRejectionGlobal {
        sigma2: f64,
    },
    /// Two random walks, `sigma1 > sigma2`.
    #[serde(rename = "dr-local")]
    DelayedRejectionLocal {
        sigma1: f64,
        sigma2: f64,
    },
    /// `w N(0, I) + (1 - w) N(r, sigma^2 I)` with `w` from [`mixture_weight`].
    Mixture {
        w_max: f64,
        w_scale: f64,
        sigma: f64,
    },
}

impl ReferenceProposal {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ReferenceProposal::RandomWalk { sigma } => sigma > 0.0 && sigma.is_finite(),
            ReferenceProposal::Mala { dt } => dt > 0.0 && dt.is_finite(),
            ReferenceProposal::DelayedRejectionGlobal { sigma2 } => sigma2 > 0.0 && sigma2.is_finite(),
            ReferenceProposal::DelayedRejectionLocal { sigma1, sigma2 } => {
                sigma2 > 0.0 && sigma1 > sigma2 && sigma1.is_finite()
            }
            ReferenceProposal::Mixture { w_max, w_scale, sigma } => {
                (0.0..1.0).contains(&w_max) && w_scale >= 0.0 && w_scale.is_finite() && sigma > 0.0 && sigma.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid proposal parameters: {self:?}")))
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ReferenceProposal::RandomWalk { .. } => "random-walk",
            ReferenceProposal::Mala { .. } => "mala",
            ReferenceProposal::DelayedRejectionGlobal { .. } => "dr-global",
            ReferenceProposal::DelayedRejectionLocal { .. } => "dr-local",
            ReferenceProposal::Mixture { .. } => "mixture",
        }
    }

    pub fn needs_gradient(&self) -> bool {
        matches!(self, ReferenceProposal::Mala { .. })
    }

    pub fn is_delayed_rejection(&self) -> bool {
        matches!(
            self,
            ReferenceProposal::DelayedRejectionGlobal { .. } | ReferenceProposal::DelayedRejectionLocal { .. }
        )
    }

    /// Multiplies every local step scale by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        match *self {
            ReferenceProposal::RandomWalk { sigma } => ReferenceProposal::RandomWalk { sigma: sigma * factor },
            ReferenceProposal::Mala { dt } => ReferenceProposal::Mala { dt: dt * factor },
            ReferenceProposal::DelayedRejectionGlobal { sigma2 } => ReferenceProposal::DelayedRejectionGlobal {
                sigma2: sigma2 * factor,
            },
            ReferenceProposal::DelayedRejectionLocal { sigma1, sigma2 } => ReferenceProposal::DelayedRejectionLocal {
                sigma1: sigma1 * factor,
                sigma2: sigma2 * factor,
            },
            ReferenceProposal::Mixture { w_max, w_scale, sigma } => ReferenceProposal::Mixture {
                w_max,
                w_scale,
                sigma: sigma * factor,
            },
        }
    }

    /// Stage kernels for the current `sigma2_m` estimate.
    pub fn kernels(&self, sigma2_m: f64) -> (Kernel, Option<Kernel>) {
        match *self {
            ReferenceProposal::RandomWalk { sigma } => (Kernel::RandomWalk { sigma }, None),
            ReferenceProposal::Mala { dt } => (Kernel::Mala { dt }, None),
            ReferenceProposal::DelayedRejectionGlobal { sigma2 } => {
                (Kernel::Independence, Some(Kernel::RandomWalk { sigma: sigma2 }))
            }
            ReferenceProposal::DelayedRejectionLocal { sigma1, sigma2 } => (
                Kernel::RandomWalk { sigma: sigma1 },
                Some(Kernel::RandomWalk { sigma: sigma2 }),
            ),
            ReferenceProposal::Mixture { w_max, w_scale, sigma } => (
                Kernel::Mixture {
                    w: mixture_weight(w_max, w_scale, sigma2_m),
                    sigma,
                },
                None,
            ),
        }
    }
}

/// `w = w_max / (1 + w_scale * sigma2_m)`. An infinite `sigma2_m` (no
/// estimate yet) gives `w = 0` unless `w_scale = 0`.
pub fn mixture_weight(w_max: f64, w_scale: f64, sigma2_m: f64) -> f64 {
    if w_scale == 0.0 {
        return w_max;
    }
    let d = 1.0 + w_scale * sigma2_m.max(0.0);
    if d.is_infinite() {
        0.0
    } else {
        w_max / d
    }
}

/// A single-stage reference kernel `q(r' | r)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kernel {
    Independence,
    RandomWalk { sigma: f64 },
    Mala { dt: f64 },
    Mixture { w: f64, sigma: f64 },
}

impl Kernel {
    pub fn needs_gradient(&self) -> bool {
        matches!(self, Kernel::Mala { .. })
    }

    /// `log q(to | from)`; `grad_from` is `grad log p~(from)`, required for MALA.
    pub fn log_density(&self, to: &[f64], from: &[f64], grad_from: Option<&[f64]>) -> Result<f64> {
        check_dim(from.len(), to.len())?;
        Ok(match *self {
            Kernel::Independence => log_normal_iso(to, None, 1.0),
            Kernel::RandomWalk { sigma } => log_normal_iso(to, Some(from), sigma),
            Kernel::Mala { dt } => {
                let g = grad_from.ok_or(Error::GradientUnavailable)?;
                check_dim(from.len(), g.len())?;
                let mean = mala_mean(from, g, dt);
                log_normal_iso(to, Some(&mean), dt)
            }
            Kernel::Mixture { w, sigma } => {
                let a = log_normal_iso(to, None, 1.0);
                let b = log_normal_iso(to, Some(from), sigma);
                if w <= 0.0 {
                    b
                } else if w >= 1.0 {
                    a
                } else {
                    log_add_exp(w.ln() + a, (1.0 - w).ln() + b)
                }
            }
        })
    }

    /// Draws `r'`; the flag is true when the draw came from a local move
    /// (anything but the independence component).
    pub fn sample<R: Rng + ?Sized>(&self, from: &[f64], grad_from: Option<&[f64]>, rng: &mut R) -> Result<(Vec<f64>, bool)> {
        let mut z = || -> f64 { StandardNormal.sample(rng) };
        Ok(match *self {
            Kernel::Independence => (from.iter().map(|_| z()).collect(), false),
            Kernel::RandomWalk { sigma } => (from.iter().map(|x| x + sigma * z()).collect(), true),
            Kernel::Mala { dt } => {
                let g = grad_from.ok_or(Error::GradientUnavailable)?;
                check_dim(from.len(), g.len())?;
                let mean = mala_mean(from, g, dt);
                (mean.iter().map(|m| m + dt * z()).collect(), true)
            }
            Kernel::Mixture { w, sigma } => {
                let u: f64 = rng.random();
                let mut z = || -> f64 { StandardNormal.sample(rng) };
                if u < w {
                    (from.iter().map(|_| z()).collect(), false)
                } else {
                    (from.iter().map(|x| x + sigma * z()).collect(), true)
                }
            }
        })
    }
}

fn mala_mean(r: &[f64], grad: &[f64], dt: f64) -> Vec<f64> {
    let h = 0.5 * dt * dt;
    r.iter().zip(grad).map(|(x, g)| x + h * g).collect()
}

/// `log N(x; mean, sigma^2 I)`, with `mean = 0` when `None`.
pub fn log_normal_iso(x: &[f64], mean: Option<&[f64]>, sigma: f64) -> f64 {
    let n = x.len() as f64;
    let ss: f64 = match mean {
        Some(m) => x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum(),
        None => x.iter().map(|a| a * a).sum(),
    };
    -0.5 * n * LN_2PI - n * sigma.ln() - 0.5 * ss / (sigma * sigma)
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `ln(1 - exp(x))` for `x <= 0`.
fn ln_1m_exp(x: f64) -> f64 {
    if x >= 0.0 {
        f64::NEG_INFINITY
    } else if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

/// `log q(r' | r)` of the first-stage kernel.
pub fn reference_log_density(
    prop: &ReferenceProposal,
    r_to: &[f64],
    r_from: &[f64],
    sigma2_m: f64,
    grad_from: Option<&[f64]>,
) -> Result<f64> {
    prop.kernels(sigma2_m).0.log_density(r_to, r_from, grad_from)
}

/// A first-stage draw with its forward density.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalOutcome {
    pub r: Vec<f64>,
    pub local: bool,
    pub log_forward: f64,
}

pub fn propose<R: Rng + ?Sized>(
    prop: &ReferenceProposal,
    r: &[f64],
    grad: Option<&[f64]>,
    rng: &mut R,
    sigma2_m: f64,
) -> Result<ProposalOutcome> {
    let k = prop.kernels(sigma2_m).0;
    let (r_new, local) = k.sample(r, grad, rng)?;
    let log_forward = k.log_density(&r_new, r, grad)?;
    Ok(ProposalOutcome {
        r: r_new,
        local,
        log_forward,
    })
}

/// A state seen through the map: `theta`, `r = T(theta)`, cached densities
/// and, when requested, `grad log p~(r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MappedPoint {
    pub theta: Vec<f64>,
    pub r: Vec<f64>,
    pub log_target: f64,
    pub log_det: f64,
    pub grad_r: Option<Vec<f64>>,
}

impl MappedPoint {
    /// `log p~(r)`.
    pub fn log_ref(&self) -> f64 {
        self.log_target - self.log_det
    }

    /// Maps a target-space point. `log_target` reuses a cached density value.
    pub fn from_theta<T: Target + ?Sized>(
        target: &T,
        map: &TriangularMap,
        theta: &[f64],
        log_target: Option<f64>,
        need_grad: bool,
    ) -> Result<Self> {
        let (r, log_det) = map.forward_with_log_det(theta)?;
        let log_target = log_target.unwrap_or_else(|| sanitize(target.log_density(theta)));
        let grad_r = if need_grad && log_target > f64::NEG_INFINITY {
            let g = target.grad_log_density(theta).ok_or(Error::GradientUnavailable)?;
            Some(map.reference_gradient_at(theta, &g)?)
        } else {
            None
        };
        Ok(MappedPoint {
            theta: theta.to_vec(),
            r,
            log_target,
            log_det,
            grad_r,
        })
    }

    /// Inverts the map at `r` and evaluates the target once. Errors arise only
    /// before the evaluation; a gradient that cannot be formed is left `None`.
    pub fn from_reference<T: Target + ?Sized>(target: &T, map: &TriangularMap, r: &[f64], need_grad: bool) -> Result<Self> {
        let theta = map.inverse(r)?;
        Self::at_preimage(target, map, r, theta, need_grad)
    }

    /// [`MappedPoint::from_reference`] with the inversion started at `hint`.
    pub fn from_reference_near<T: Target + ?Sized>(
        target: &T,
        map: &TriangularMap,
        r: &[f64],
        hint: &[f64],
        need_grad: bool,
    ) -> Result<Self> {
        let theta = map.inverse_near(r, hint)?;
        Self::at_preimage(target, map, r, theta, need_grad)
    }

    fn at_preimage<T: Target + ?Sized>(target: &T, map: &TriangularMap, r: &[f64], theta: Vec<f64>, need_grad: bool) -> Result<Self> {
        let log_det = map.log_det_jacobian(&theta)?;
        let log_target = sanitize(target.log_density(&theta));
        let grad_r = if need_grad && log_target > f64::NEG_INFINITY {
            target
                .grad_log_density(&theta)
                .and_then(|g| map.reference_gradient_at(&theta, &g).ok())
        } else {
            None
        };
        Ok(MappedPoint {
            theta,
            r: r.to_vec(),
            log_target,
            log_det,
            grad_r,
        })
    }

    /// A reference point whose preimage could not be formed; it carries zero
    /// density.
    pub fn unreachable(r: Vec<f64>) -> Self {
        MappedPoint {
            theta: Vec::new(),
            r,
            log_target: f64::NEG_INFINITY,
            log_det: 0.0,
            grad_r: None,
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad_r.as_deref()
    }
}

/// NaN and `+inf` are treated as zero density.
pub fn sanitize(log_density: f64) -> f64 {
    if log_density.is_nan() || log_density == f64::INFINITY {
        f64::NEG_INFINITY
    } else {
        log_density
    }
}

/// `log q_theta(theta' | theta) = log q_r(T(theta') | T(theta)) + log det DT(theta')`.
///
/// `grad_r_from` is `grad log p~` at `T(theta)`, needed only for MALA.
pub fn target_proposal_log_density(
    map: &TriangularMap,
    kernel: &Kernel,
    theta_to: &[f64],
    theta_from: &[f64],
    grad_r_from: Option<&[f64]>,
) -> Result<f64> {
    let (r_to, ld_to) = map.forward_with_log_det(theta_to)?;
    let r_from = map.forward(theta_from)?;
    Ok(kernel.log_density(&r_to, &r_from, grad_r_from)? + ld_to)
}

/// Log of the MH ratio from the four log values; `-inf` when the proposed
/// density is zero.
pub fn mh_log_ratio(log_p_from: f64, log_p_to: f64, log_q_forward: f64, log_q_reverse: f64) -> f64 {
    if log_p_to == f64::NEG_INFINITY || log_p_to.is_nan() {
        return f64::NEG_INFINITY;
    }
    let v = log_p_to - log_p_from + log_q_reverse - log_q_forward;
    if v.is_nan() {
        f64::NEG_INFINITY
    } else {
        v
    }
}

/// Target-space MH log ratio for a single-stage kernel with a fixed map.
pub fn mh_accept_log_ratio<T: Target + ?Sized>(
    target: &T,
    map: &TriangularMap,
    kernel: &Kernel,
    theta: &[f64],
    theta_new: &[f64],
) -> Result<f64> {
    let lp = sanitize(target.log_density(theta));
    let lp_new = sanitize(target.log_density(theta_new));
    if lp_new == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let grads = if kernel.needs_gradient() {
        let g = |th: &[f64]| -> Result<Vec<f64>> {
            let gt = target.grad_log_density(th).ok_or(Error::GradientUnavailable)?;
            map.reference_gradient_at(th, &gt)
        };
        Some((g(theta)?, g(theta_new)?))
    } else {
        None
    };
    let fwd = target_proposal_log_density(map, kernel, theta_new, theta, grads.as_ref().map(|g| g.0.as_slice()))?;
    let rev = target_proposal_log_density(map, kernel, theta, theta_new, grads.as_ref().map(|g| g.1.as_slice()))?;
    Ok(mh_log_ratio(lp, lp_new, fwd, rev))
}

/// Log values entering the two-stage delayed-rejection acceptance for the
/// path `x -> y1 (rejected) -> y2`. `q1_a_b` is `log q1(b | a)`; the second
/// stage kernel is centred at the state it starts from, so `q2_x_y2 =
/// log q2(y2 | x)` and `q2_y2_x = log q2(x | y2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrLogTerms {
    pub lp_x: f64,
    pub lp_y1: f64,
    pub lp_y2: f64,
    pub q1_x_y1: f64,
    pub q1_y1_x: f64,
    pub q1_y2_y1: f64,
    pub q1_y1_y2: f64,
    pub q2_x_y2: f64,
    pub q2_y2_x: f64,
}

/// Log of the second-stage acceptance ratio. Returns `-inf` for a
/// probability-zero path (first stage certain to accept from `x`, or from
/// `y2` on the reverse path).
pub fn dr_stage2_log_ratio(t: &DrLogTerms) -> f64 {
    if t.lp_y2 == f64::NEG_INFINITY || t.lp_y2.is_nan() {
        return f64::NEG_INFINITY;
    }
    let a1_fwd = mh_log_ratio(t.lp_x, t.lp_y1, t.q1_x_y1, t.q1_y1_x).min(0.0);
    let a1_rev = mh_log_ratio(t.lp_y2, t.lp_y1, t.q1_y2_y1, t.q1_y1_y2).min(0.0);
    let den_rej = ln_1m_exp(a1_fwd);
    let num_rej = ln_1m_exp(a1_rev);
    if den_rej == f64::NEG_INFINITY || num_rej == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let v = t.lp_y2 + t.q1_y2_y1 + t.q2_y2_x + num_rej - (t.lp_x + t.q1_x_y1 + t.q2_x_y2 + den_rej);
    if v.is_nan() {
        f64::NEG_INFINITY
    } else {
        v
    }
}

/// Assembles [`DrLogTerms`] from mapped points.
pub fn dr_log_terms(k1: &Kernel, k2: &Kernel, x: &MappedPoint, y1: &MappedPoint, y2: &MappedPoint) -> Result<DrLogTerms> {
    Ok(DrLogTerms {
        lp_x: x.log_ref(),
        lp_y1: y1.log_ref(),
        lp_y2: y2.log_ref(),
        q1_x_y1: k1.log_density(&y1.r, &x.r, x.grad())?,
        q1_y1_x: k1.log_density(&x.r, &y1.r, y1.grad())?,
        q1_y2_y1: k1.log_density(&y1.r, &y2.r, y2.grad())?,
        q1_y1_y2: k1.log_density(&y2.r, &y1.r, y1.grad())?,
        q2_x_y2: k2.log_density(&y2.r, &x.r, x.grad())?,
        q2_y2_x: k2.log_density(&x.r, &y2.r, y2.grad())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polybasis::{build_diagonal, PolynomialFamily};
    use crate::transport_map::{MapComponent, DEFAULT_LAMBDA_MIN};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn poly1d(coeffs: &[f64]) -> TriangularMap {
        let set = build_diagonal(0, coeffs.len() as u32 - 1, 1);
        TriangularMap::new(
            PolynomialFamily::Monomial,
            vec![MapComponent::new(set, coeffs.to_vec()).unwrap()],
            DEFAULT_LAMBDA_MIN,
            f64::INFINITY,
        )
        .unwrap()
    }

    /// `pi(theta) ~ exp(-theta^4/4 - theta^2/2)`.
    struct Quartic;
    impl Target for Quartic {
        fn dim(&self) -> usize {
            1
        }
        fn log_density(&self, t: &[f64]) -> f64 {
            -0.25 * t[0].powi(4) - 0.5 * t[0] * t[0]
        }
        fn grad_log_density(&self, t: &[f64]) -> Option<Vec<f64>> {
            Some(vec![-t[0].powi(3) - t[0]])
        }
        fn has_gradient(&self) -> bool {
            true
        }
    }

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for k in 1..n {
            s += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn density_examples() {
        let rw = ReferenceProposal::RandomWalk { sigma: 1.0 };
        let v = reference_log_density(&rw, &[0.7], &[0.7], 0.0, None).unwrap();
        assert!((v + 0.5 * LN_2PI).abs() < 1e-15);
        assert_eq!(mixture_weight(0.9, 1.0, 0.0), 0.9);
        assert!((mixture_weight(0.9, 1.0, 1.0) - 0.45).abs() < 1e-15);
        assert_eq!(mixture_weight(0.9, 1.0, f64::INFINITY), 0.0);
        assert_eq!(mixture_weight(0.9, 0.0, f64::INFINITY), 0.9);
        let mala = ReferenceProposal::Mala { dt: 0.5 };
        assert_eq!(reference_log_density(&mala, &[0.0], &[0.0], 0.0, None), Err(Error::GradientUnavailable));
    }

    #[test]
    fn mixture_weight_is_monotone() {
        let mut prev = mixture_weight(0.8, 2.0, 0.0);
        for k in 1..200 {
            let w = mixture_weight(0.8, 2.0, k as f64 * 0.05);
            assert!(w <= prev);
            prev = w;
        }
    }

    #[test]
    fn linear_map_density_example() {
        let m = poly1d(&[0.0, 2.0]);
        let k = Kernel::RandomWalk { sigma: 1.0 };
        let (a, b) = (0.3, -0.4);
        let got = target_proposal_log_density(&m, &k, &[b], &[a], None).unwrap();
        let expect = -0.5 * LN_2PI - 0.5 * (2.0 * b - 2.0 * a).powi(2) + 2f64.ln();
        assert!((got - expect).abs() < 1e-14);
        let id = poly1d(&[0.0, 1.0]);
        let got = target_proposal_log_density(&id, &k, &[b], &[a], None).unwrap();
        assert_eq!(got, k.log_density(&[b], &[a], None).unwrap());
    }

    #[test]
    fn target_space_densities_integrate_to_one() {
        let m = poly1d(&[0.1, 1.0, 0.0, 0.2]);
        let kernels = [
            Kernel::Independence,
            Kernel::RandomWalk { sigma: 0.7 },
            Kernel::Mala { dt: 0.6 },
            Kernel::Mixture { w: 0.3, sigma: 0.5 },
        ];
        for theta in [-1.3, 0.0, 0.8] {
            let p = MappedPoint::from_theta(&Quartic, &m, &[theta], None, true).unwrap();
            for k in &kernels {
                let z = simpson(
                    |t| target_proposal_log_density(&m, k, &[t], &[theta], p.grad()).unwrap().exp(),
                    -20.0,
                    20.0,
                    40_000,
                );
                assert!((z - 1.0).abs() < 1e-6, "{k:?} at {theta}: {z}");
            }
        }
    }

    #[test]
    fn sampling_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let r = [0.5, -1.0];
        let prop = ReferenceProposal::RandomWalk { sigma: 0.4 };
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let o = propose(&prop, &r, None, &mut rng, 0.0).unwrap();
            sum[0] += o.r[0] - r[0];
            sum[1] += o.r[1] - r[1];
        }
        let se = 0.4 / (n as f64).sqrt();
        assert!(sum.iter().all(|s| (s / n as f64).abs() < 4.0 * se));

        // identity map on N(0, I): grad log p~(r) = -r
        let prop = ReferenceProposal::Mala { dt: 0.8 };
        let grad: Vec<f64> = r.iter().map(|x| -x).collect();
        let mut mean = [0.0; 2];
        for _ in 0..n {
            let o = propose(&prop, &r, Some(&grad), &mut rng, 0.0).unwrap();
            mean[0] += (o.r[0] - r[0]) / n as f64;
            mean[1] += (o.r[1] - r[1]) / n as f64;
        }
        let se = 0.8 / (n as f64).sqrt();
        for k in 0..2 {
            assert!((mean[k] + 0.32 * r[k]).abs() < 4.0 * se);
        }

        let prop = ReferenceProposal::Mixture {
            w_max: 0.999_999_999_999,
            w_scale: 0.0,
            sigma: 0.1,
        };
        let far = [100.0, 100.0];
        for _ in 0..1000 {
            let o = propose(&prop, &far, None, &mut rng, 0.0).unwrap();
            assert!(!o.local);
            assert!(o.r.iter().all(|v| v.abs() < 10.0));
        }
    }

    #[test]
    fn mala_reduces_to_random_walk_without_drift() {
        let k1 = Kernel::Mala { dt: 0.3 };
        let k2 = Kernel::RandomWalk { sigma: 0.3 };
        let (a, b) = ([0.2, 1.0], [0.5, 0.1]);
        let zero = [0.0, 0.0];
        assert_eq!(k1.log_density(&b, &a, Some(&zero)).unwrap(), k2.log_density(&b, &a, None).unwrap());
    }

    #[test]
    fn accept_ratio_examples() {
        let id = poly1d(&[0.0, 1.0]);
        struct Flat;
        impl Target for Flat {
            fn dim(&self) -> usize {
                1
            }
            fn log_density(&self, t: &[f64]) -> f64 {
                if t[0] > 5.0 {
                    f64::NEG_INFINITY
                } else {
                    0.0
                }
            }
        }
        let k = Kernel::RandomWalk { sigma: 1.0 };
        assert_eq!(mh_accept_log_ratio(&Flat, &id, &k, &[0.0], &[1.0]).unwrap(), 0.0);
        assert_eq!(mh_accept_log_ratio(&Flat, &id, &k, &[0.0], &[6.0]).unwrap(), f64::NEG_INFINITY);
        assert_eq!(mh_log_ratio(-1.0, -1.0, -2.0, -2.0), 0.0);
    }

    #[test]
    fn reference_ratio_matches_target_space_ratio() {
        let m = poly1d(&[0.1, 1.0, 0.0, 0.2]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in [Kernel::RandomWalk { sigma: 0.8 }, Kernel::Mala { dt: 0.5 }, Kernel::Mixture { w: 0.4, sigma: 0.5 }] {
            for _ in 0..200 {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                let target_space = mh_accept_log_ratio(&Quartic, &m, &k, &[a], &[b]).unwrap();
                let x = MappedPoint::from_theta(&Quartic, &m, &[a], None, true).unwrap();
                let y = MappedPoint::from_theta(&Quartic, &m, &[b], None, true).unwrap();
                let fwd = k.log_density(&y.r, &x.r, x.grad()).unwrap();
                let rev = k.log_density(&x.r, &y.r, y.grad()).unwrap();
                let reference = mh_log_ratio(x.log_ref(), y.log_ref(), fwd, rev);
                assert!((target_space - reference).abs() < 1e-10 * target_space.abs().max(1.0));
            }
        }
    }

    #[test]
    fn single_stage_detailed_balance() {
        let m = poly1d(&[0.1, 1.0, 0.0, 0.2]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for k in [Kernel::RandomWalk { sigma: 0.8 }, Kernel::Mala { dt: 0.5 }, Kernel::Mixture { w: 0.4, sigma: 0.5 }, Kernel::Independence] {
            for _ in 0..1000 {
                let a: f64 = 1.5 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                let b: f64 = 1.5 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                let x = MappedPoint::from_theta(&Quartic, &m, &[a], None, true).unwrap();
                let y = MappedPoint::from_theta(&Quartic, &m, &[b], None, true).unwrap();
                let flow = |p: &MappedPoint, q: &MappedPoint| {
                    let lq = target_proposal_log_density(&m, &k, &q.theta, &p.theta, p.grad()).unwrap();
                    let la = mh_accept_log_ratio(&Quartic, &m, &k, &p.theta, &q.theta).unwrap().min(0.0);
                    p.log_target + lq + la
                };
                let (f, g) = (flow(&x, &y), flow(&y, &x));
                assert!((f - g).abs() < 1e-9 * f.abs().max(1.0), "{k:?}: {f} vs {g}");
            }
        }
    }

    #[test]
    fn two_stage_detailed_balance() {
        let m = poly1d(&[0.1, 1.0, 0.0, 0.2]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pairs = [
            (Kernel::Independence, Kernel::RandomWalk { sigma: 0.5 }),
            (Kernel::RandomWalk { sigma: 1.5 }, Kernel::RandomWalk { sigma: 0.4 }),
        ];
        let mut z = || -> f64 { 1.5 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) };
        for (k1, k2) in pairs {
            let mut checked = 0;
            while checked < 500 {
                let pts: Vec<MappedPoint> = (0..3)
                    .map(|_| MappedPoint::from_theta(&Quartic, &m, &[z()], None, false).unwrap())
                    .collect();
                let (x, y1, y2) = (&pts[0], &pts[1], &pts[2]);
                let fwd = dr_log_terms(&k1, &k2, x, y1, y2).unwrap();
                let rev = dr_log_terms(&k1, &k2, y2, y1, x).unwrap();
                let a_f = dr_stage2_log_ratio(&fwd);
                let a_r = dr_stage2_log_ratio(&rev);
                if a_f == f64::NEG_INFINITY {
                    assert_eq!(a_r, f64::NEG_INFINITY);
                    continue;
                }
                // pi(x) q1(y1|x) (1 - a1(x,y1)) q2(y2|x) a2 in target space
                let path = |t: &DrLogTerms, a2: f64, from: &MappedPoint, mid: &MappedPoint, to: &MappedPoint| {
                    let q1 = target_proposal_log_density(&m, &k1, &mid.theta, &from.theta, None).unwrap();
                    let q2 = target_proposal_log_density(&m, &k2, &to.theta, &from.theta, None).unwrap();
                    let a1 = mh_log_ratio(t.lp_x, t.lp_y1, t.q1_x_y1, t.q1_y1_x).min(0.0);
                    from.log_target + q1 + ln_1m_exp(a1) + q2 + a2.min(0.0)
                };
                let f = path(&fwd, a_f, x, y1, y2);
                let g = path(&rev, a_r, y2, y1, x);
                assert!((f - g).abs() < 1e-8 * f.abs().max(1.0), "{f} vs {g}");
                checked += 1;
            }
        }
    }

    /// Builds the full transition matrix of a (possibly two-stage) MH kernel
    /// on a finite state space from normalized discrete proposal matrices.
    fn discrete_kernel(p: &[f64], q1: &[Vec<f64>], q2: Option<&[Vec<f64>]>) -> Vec<Vec<f64>> {
        let n = p.len();
        let lp: Vec<f64> = p.iter().map(|v| v.ln()).collect();
        let lq = |q: &[Vec<f64>], a: usize, b: usize| q[a][b].ln();
        let mut k = vec![vec![0.0; n]; n];
        for x in 0..n {
            for y1 in 0..n {
                let a1 = mh_log_ratio(lp[x], lp[y1], lq(q1, x, y1), lq(q1, y1, x)).min(0.0).exp();
                k[x][y1] += q1[x][y1] * a1;
                if let Some(q2) = q2 {
                    for y2 in 0..n {
                        let t = DrLogTerms {
                            lp_x: lp[x],
                            lp_y1: lp[y1],
                            lp_y2: lp[y2],
                            q1_x_y1: lq(q1, x, y1),
                            q1_y1_x: lq(q1, y1, x),
                            q1_y2_y1: lq(q1, y2, y1),
                            q1_y1_y2: lq(q1, y1, y2),
                            q2_x_y2: lq(q2, x, y2),
                            q2_y2_x: lq(q2, y2, x),
                        };
                        let a2 = dr_stage2_log_ratio(&t).min(0.0).exp();
                        k[x][y2] += q1[x][y1] * (1.0 - a1) * q2[x][y2] * a2;
                    }
                }
            }
            let stay: f64 = 1.0 - k[x].iter().sum::<f64>();
            k[x][x] += stay;
        }
        k
    }

    fn grid_kernel(kernel: &Kernel, pts: &[f64]) -> Vec<Vec<f64>> {
        pts.iter()
            .map(|&a| {
                let w: Vec<f64> = pts.iter().map(|&b| kernel.log_density(&[b], &[a], None).unwrap().exp()).collect();
                let s: f64 = w.iter().sum();
                w.into_iter().map(|v| v / s).collect()
            })
            .collect()
    }

    #[test]
    fn five_state_invariance() {
        let pts = [-2.0, -1.0, 0.0, 1.0, 2.5];
        let raw: Vec<f64> = pts.iter().map(|&t| Quartic.log_density(&[t]).exp() * (1.0 + 0.3 * t).abs()).collect();
        let s: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let rw = grid_kernel(&Kernel::RandomWalk { sigma: 1.2 }, &pts);
        let ind = grid_kernel(&Kernel::Independence, &pts);
        let small = grid_kernel(&Kernel::RandomWalk { sigma: 0.5 }, &pts);
        for k in [
            discrete_kernel(&p, &rw, None),
            discrete_kernel(&p, &ind, Some(&small)),
            discrete_kernel(&p, &rw, Some(&small)),
        ] {
            let moved: Vec<f64> = (0..5).map(|y| (0..5).map(|x| p[x] * k[x][y]).sum()).collect();
            let tv: f64 = 0.5 * moved.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum::<f64>();
            assert!(tv < 1e-12, "tv {tv}");
            assert!(k.iter().flatten().all(|v| *v >= -1e-15));
        }
    }

    #[test]
    fn dr_symmetric_collapse() {
        // pi(y2) = pi(x), symmetric q2, equal first-stage rejection on both paths
        let t = DrLogTerms {
            lp_x: -1.0,
            lp_y1: -3.0,
            lp_y2: -1.0,
            q1_x_y1: -2.0,
            q1_y1_x: -2.0,
            q1_y2_y1: -2.0,
            q1_y1_y2: -2.0,
            q2_x_y2: -0.7,
            q2_y2_x: -0.7,
        };
        assert!(dr_stage2_log_ratio(&t).abs() < 1e-15);
        let certain = DrLogTerms { lp_y1: 0.0, ..t };
        assert_eq!(dr_stage2_log_ratio(&certain), f64::NEG_INFINITY);
    }

    #[test]
    fn scaling_and_validation() {
        let p = ReferenceProposal::DelayedRejectionLocal { sigma1: 1.0, sigma2: 0.5 };
        assert!(p.validate().is_ok());
        assert_eq!(p.scaled(2.0), ReferenceProposal::DelayedRejectionLocal { sigma1: 2.0, sigma2: 1.0 });
        assert!(ReferenceProposal::DelayedRejectionLocal { sigma1: 0.5, sigma2: 1.0 }.validate().is_err());
        assert!(ReferenceProposal::Mixture { w_max: 1.0, w_scale: 1.0, sigma: 1.0 }.validate().is_err());
        assert!(ReferenceProposal::RandomWalk { sigma: 0.0 }.validate().is_err());
    }
}
