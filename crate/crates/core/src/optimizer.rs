//! Sample-average map fitting.
//!
//! Each map component solves an independent convex problem
//!
//! ```text
//! min_g  1/2 g^T (F^T F) g - sum_k log([G g]_k) + k_R |g - g_id|^2
//! s.t.   G g >= lambda_min
//! ```
//!
//! where `[F]_{k,j} = psi_j(theta_k)` and `[G]_{k,j} = d psi_j / d theta_i
//! (theta_k)`. The log term acts as a barrier, so a damped Newton method with
//! fraction-to-boundary step capping and Armijo backtracking is sufficient.
//! Rows are only ever appended; `F^T F` is accumulated incrementally and `F`
//! itself is not stored.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::par::{self, Execution};
use crate::polybasis::{MultiIndexSet, PolynomialFamily, UnivariateTable};
use crate::samples::SampleMatrix;
use crate::transport_map::{identity_coefficients, MapComponent, TriangularMap, DEFAULT_LAMBDA_MIN};

/// How the fitted map's extension radius is chosen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RadiusPolicy {
    /// No linear extension.
    #[default]
    Unbounded,
    /// Ten times the largest sample norm seen so far.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub k_r: f64,
    pub lambda_min: f64,
    pub newton_tol: f64,
    pub max_newton_iters: usize,
    pub backtrack_contraction: f64,
    pub sufficient_decrease: f64,
    pub fraction_to_boundary: f64,
    pub radius: RadiusPolicy,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            k_r: 1e-4,
            lambda_min: DEFAULT_LAMBDA_MIN,
            newton_tol: 1e-8,
            max_newton_iters: 50,
            backtrack_contraction: 0.5,
            sufficient_decrease: 1e-4,
            fraction_to_boundary: 0.995,
            radius: RadiusPolicy::Unbounded,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.k_r >= 0.0
            && self.lambda_min > 0.0
            && self.newton_tol > 0.0
            && self.max_newton_iters > 0
            && self.backtrack_contraction > 0.0
            && self.backtrack_contraction < 1.0
            && self.sufficient_decrease > 0.0
            && self.sufficient_decrease < 1.0
            && self.fraction_to_boundary > 0.0
            && self.fraction_to_boundary < 1.0;
        let radius_ok = match self.radius {
            RadiusPolicy::Fixed(r) => r > 0.0,
            _ => true,
        };
        if ok && radius_ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid optimizer configuration: {self:?}")))
        }
    }
}

/// Outcome of one component solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub coefficients: Vec<f64>,
    pub iterations: usize,
    /// Objective before the first step and after every accepted step.
    pub objective_trace: Vec<f64>,
    pub grad_norm: f64,
    pub warm_started: bool,
}

impl SolveReport {
    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace is never empty")
    }

    /// True when every accepted step strictly lowered the objective.
    pub fn strictly_decreasing(&self) -> bool {
        self.objective_trace.windows(2).all(|w| w[1] < w[0])
    }
}

/// Per-component accumulated problem data.
#[derive(Debug, Clone)]
pub struct ComponentWorkspace {
    family: PolynomialFamily,
    set: MultiIndexSet,
    /// Columns `j` with `j_i > 0`; all other columns of `G` vanish.
    deriv_cols: Vec<usize>,
    /// `K x deriv_cols.len()`, row-major.
    g_rows: Vec<f64>,
    /// `M x M` accumulation of `F^T F` (full, symmetric).
    gram: Vec<f64>,
    rows: usize,
    identity: Vec<f64>,
    max_norm: f64,
}

impl ComponentWorkspace {
    pub fn new(family: PolynomialFamily, set: MultiIndexSet) -> Result<Self> {
        let i = set.component();
        let identity = identity_coefficients(&set, i)?;
        let deriv_cols = set
            .indices()
            .iter()
            .enumerate()
            .filter(|(_, j)| j.entries()[i] > 0)
            .map(|(c, _)| c)
            .collect();
        let m = set.len();
        Ok(ComponentWorkspace {
            family,
            set,
            deriv_cols,
            g_rows: Vec::new(),
            gram: vec![0.0; m * m],
            rows: 0,
            identity,
            max_norm: 0.0,
        })
    }

    pub fn component(&self) -> usize {
        self.set.component()
    }

    pub fn index_set(&self) -> &MultiIndexSet {
        &self.set
    }

    pub fn num_samples(&self) -> usize {
        self.rows
    }

    pub fn num_terms(&self) -> usize {
        self.set.len()
    }

    pub fn identity_coefficients(&self) -> &[f64] {
        &self.identity
    }

    /// `F^T F` as a row-major `M x M` matrix.
    pub fn gram(&self) -> &[f64] {
        &self.gram
    }

    /// Row of `F` (basis values) and the full row of `G` at one sample.
    pub fn basis_rows(&self, theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let i = self.component();
        let a = i + 1;
        let tab = UnivariateTable::new(self.family, &theta[..a], self.set.max_degree() as usize);
        let f = self.set.indices().iter().map(|j| tab.psi(j, a)).collect();
        let g = self.set.indices().iter().map(|j| tab.dpsi(j, a, i)).collect();
        (f, g)
    }

    /// Appends one row per sample to `G` and accumulates `F^T F`.
    pub fn append_samples<'a, I>(&mut self, samples: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let m = self.set.len();
        let dim = self.set.dim();
        let i = self.component();
        let a = i + 1;
        let maxd = self.set.max_degree() as usize;
        let mut f = vec![0.0; m];
        for theta in samples {
            check_dim(dim, theta.len())?;
            let tab = UnivariateTable::new(self.family, &theta[..a], maxd);
            for (slot, j) in f.iter_mut().zip(self.set.indices()) {
                *slot = tab.psi(j, a);
            }
            for &c in &self.deriv_cols {
                self.g_rows.push(tab.dpsi(&self.set.indices()[c], a, i));
            }
            for p in 0..m {
                let fp = f[p];
                if fp == 0.0 {
                    continue;
                }
                let row = &mut self.gram[p * m..(p + 1) * m];
                for q in p..m {
                    row[q] += fp * f[q];
                }
            }
            self.rows += 1;
            self.max_norm = self
                .max_norm
                .max(theta.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
        for p in 0..m {
            for q in 0..p {
                self.gram[p * m + q] = self.gram[q * m + p];
            }
        }
        Ok(())
    }

    /// `G gamma`.
    fn g_times(&self, gamma: &[f64]) -> Vec<f64> {
        let c = self.deriv_cols.len();
        let sub: Vec<f64> = self.deriv_cols.iter().map(|&j| gamma[j]).collect();
        self.g_rows
            .chunks_exact(c.max(1))
            .take(self.rows)
            .map(|row| row.iter().zip(&sub).map(|(g, s)| g * s).sum())
            .collect()
    }

    fn quad(&self, gamma: &[f64]) -> f64 {
        let m = gamma.len();
        let mut s = 0.0;
        for p in 0..m {
            let row = &self.gram[p * m..(p + 1) * m];
            s += gamma[p] * row.iter().zip(gamma).map(|(a, g)| a * g).sum::<f64>();
        }
        0.5 * s
    }

    fn reg(&self, gamma: &[f64], k_r: f64) -> f64 {
        k_r * gamma
            .iter()
            .zip(&self.identity)
            .map(|(g, e)| (g - e) * (g - e))
            .sum::<f64>()
    }

    /// Regularized objective; `+inf` if any `[G gamma]_k <= 0`.
    pub fn objective(&self, gamma: &[f64], k_r: f64) -> f64 {
        let s = self.g_times(gamma);
        self.objective_with(gamma, &s, k_r)
    }

    fn objective_with(&self, gamma: &[f64], s: &[f64], k_r: f64) -> f64 {
        let mut barrier = 0.0;
        for &v in s {
            if !(v > 0.0) {
                return f64::INFINITY;
            }
            barrier += v.ln();
        }
        self.quad(gamma) - barrier + self.reg(gamma, k_r)
    }

    /// Gradient `(F^T F) g - G^T (1/(G g)) + 2 k_R (g - g_id)`.
    pub fn gradient(&self, gamma: &[f64], k_r: f64) -> Vec<f64> {
        let s = self.g_times(gamma);
        self.gradient_with(gamma, &s, k_r)
    }

    fn gradient_with(&self, gamma: &[f64], s: &[f64], k_r: f64) -> Vec<f64> {
        let m = gamma.len();
        let c = self.deriv_cols.len();
        let mut g: Vec<f64> = (0..m)
            .map(|p| {
                let row = &self.gram[p * m..(p + 1) * m];
                row.iter().zip(gamma).map(|(a, x)| a * x).sum::<f64>()
                    + 2.0 * k_r * (gamma[p] - self.identity[p])
            })
            .collect();
        let mut acc = vec![0.0; c];
        for (row, sv) in self.g_rows.chunks_exact(c.max(1)).zip(s) {
            let w = 1.0 / sv;
            for (a, gv) in acc.iter_mut().zip(row) {
                *a += w * gv;
            }
        }
        for (a, &col) in acc.iter().zip(&self.deriv_cols) {
            g[col] -= a;
        }
        g
    }

    /// Hessian `F^T F + G^T diag(1/(G g)^2) G + 2 k_R I`, row-major.
    pub fn hessian(&self, gamma: &[f64], k_r: f64) -> Vec<f64> {
        let s = self.g_times(gamma);
        self.hessian_with(&s, k_r)
    }

    fn hessian_with(&self, s: &[f64], k_r: f64) -> Vec<f64> {
        let m = self.set.len();
        let c = self.deriv_cols.len();
        let mut h = self.gram.clone();
        for p in 0..m {
            h[p * m + p] += 2.0 * k_r;
        }
        let mut acc = vec![0.0; c * c];
        for (row, sv) in self.g_rows.chunks_exact(c.max(1)).zip(s) {
            let w = 1.0 / (sv * sv);
            for p in 0..c {
                let wp = w * row[p];
                let out = &mut acc[p * c..(p + 1) * c];
                for q in p..c {
                    out[q] += wp * row[q];
                }
            }
        }
        for p in 0..c {
            for q in p..c {
                let v = acc[p * c + q];
                let (cp, cq) = (self.deriv_cols[p], self.deriv_cols[q]);
                h[cp * m + cq] += v;
                if p != q {
                    h[cq * m + cp] += v;
                }
            }
        }
        h
    }

    /// Largest sample norm appended so far.
    pub fn max_sample_norm(&self) -> f64 {
        self.max_norm
    }

    /// Minimum of `G gamma` over all rows.
    pub fn min_diagonal_derivative(&self, gamma: &[f64]) -> f64 {
        self.g_times(gamma).into_iter().fold(f64::INFINITY, f64::min)
    }

    /// A strictly feasible starting point: the warm start if it satisfies
    /// `G g > lambda_min`, otherwise the closest blend towards the identity
    /// coefficients that does (the identity has `G g_id = 1`).
    fn feasible_start(&self, warm: Option<&[f64]>, lambda_min: f64) -> (Vec<f64>, bool) {
        let Some(w) = warm else {
            return (self.identity.clone(), false);
        };
        if w.len() != self.identity.len() || w.iter().any(|v| !v.is_finite()) {
            return (self.identity.clone(), false);
        }
        let mut blend = 0.0;
        for _ in 0..30 {
            let g: Vec<f64> = w
                .iter()
                .zip(&self.identity)
                .map(|(a, b)| (1.0 - blend) * a + blend * b)
                .collect();
            if self.min_diagonal_derivative(&g) > lambda_min {
                return (g, true);
            }
            blend = if blend == 0.0 { 0.5 } else { 0.5 * (1.0 + blend) };
        }
        (self.identity.clone(), false)
    }

    /// Damped Newton solve from `warm_start` (or the identity coefficients).
    pub fn solve(&self, cfg: &OptimizerConfig, warm_start: Option<&[f64]>) -> Result<SolveReport> {
        cfg.validate()?;
        if self.rows == 0 {
            return Err(Error::InsufficientSamples { needed: 1, found: 0 });
        }
        let m = self.set.len();
        let (mut gamma, warm_started) = self.feasible_start(warm_start, cfg.lambda_min);
        let mut s = self.g_times(&gamma);
        let mut f = self.objective_with(&gamma, &s, cfg.k_r);
        let mut trace = vec![f];
        let mut grad_norm = f64::INFINITY;
        for it in 0..=cfg.max_newton_iters {
            let grad = self.gradient_with(&gamma, &s, cfg.k_r);
            grad_norm = norm(&grad);
            if grad_norm <= cfg.newton_tol {
                return Ok(report(gamma, it, trace, grad_norm, warm_started));
            }
            if it == cfg.max_newton_iters {
                break;
            }
            let hess = DMatrix::from_row_slice(m, m, &self.hessian_with(&s, cfg.k_r));
            let chol = hess.cholesky().ok_or(Error::Factorization)?;
            let step = -chol.solve(&DVector::from_column_slice(&grad));
            let step: Vec<f64> = step.iter().copied().collect();
            let decrement = -dot(&grad, &step);
            // Nothing left to gain beyond the objective's rounding error.
            if decrement <= 1e-15 * f.abs().max(1.0) {
                return Ok(report(gamma, it, trace, grad_norm, warm_started));
            }
            let gd = self.g_times(&step);
            let mut t_max = f64::INFINITY;
            for (sv, dv) in s.iter().zip(&gd) {
                if *dv < 0.0 {
                    t_max = t_max.min((sv - cfg.lambda_min) / -dv);
                }
            }
            let mut t = 1.0f64.min(cfg.fraction_to_boundary * t_max);
            let mut accepted = None;
            while t > 1e-16 {
                let cand: Vec<f64> = gamma.iter().zip(&step).map(|(g, d)| g + t * d).collect();
                let cs = self.g_times(&cand);
                let fc = self.objective_with(&cand, &cs, cfg.k_r);
                if fc <= f - cfg.sufficient_decrease * t * decrement && fc < f {
                    accepted = Some((cand, cs, fc));
                    break;
                }
                t *= cfg.backtrack_contraction;
            }
            match accepted {
                Some((g, cs, fc)) => {
                    gamma = g;
                    s = cs;
                    f = fc;
                    trace.push(f);
                }
                None if decrement <= 1e-10 * f.abs().max(1.0) => {
                    return Ok(report(gamma, it, trace, grad_norm, warm_started));
                }
                None => {
                    return Err(Error::NonConvergence {
                        iterations: it,
                        grad_norm,
                    })
                }
            }
        }
        Err(Error::NonConvergence {
            iterations: cfg.max_newton_iters,
            grad_norm,
        })
    }
}

fn report(coefficients: Vec<f64>, iterations: usize, objective_trace: Vec<f64>, grad_norm: f64, warm_started: bool) -> SolveReport {
    SolveReport {
        coefficients,
        iterations,
        objective_trace,
        grad_norm,
        warm_started,
    }
}

/// Holds one workspace per component and refits the whole map.
#[derive(Debug, Clone)]
pub struct MapOptimizer {
    family: PolynomialFamily,
    workspaces: Vec<ComponentWorkspace>,
    config: OptimizerConfig,
}

/// A fitted map together with the per-component solver reports.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub map: TriangularMap,
    pub reports: Vec<SolveReport>,
}

impl MapOptimizer {
    pub fn new(family: PolynomialFamily, sets: Vec<MultiIndexSet>, config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        let n = sets.len();
        let workspaces = sets
            .into_iter()
            .enumerate()
            .map(|(i, set)| {
                if set.component() != i || set.dim() != n {
                    return Err(Error::IndexSetMismatch(format!(
                        "slot {i} holds a set for component {} of dimension {}",
                        set.component(),
                        set.dim()
                    )));
                }
                ComponentWorkspace::new(family, set)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MapOptimizer {
            family,
            workspaces,
            config,
        })
    }

    pub fn dim(&self) -> usize {
        self.workspaces.len()
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn workspaces(&self) -> &[ComponentWorkspace] {
        &self.workspaces
    }

    pub fn num_samples(&self) -> usize {
        self.workspaces.first().map_or(0, |w| w.num_samples())
    }

    /// Appends rows `range` of `samples` to every component workspace.
    pub fn append(&mut self, samples: &SampleMatrix, range: std::ops::Range<usize>, exec: Execution) -> Result<()> {
        check_dim(self.dim(), samples.dim())?;
        let results = {
            let mut out: Vec<Result<()>> = vec![Ok(()); self.workspaces.len()];
            let ws = &mut self.workspaces;
            let mut pairs: Vec<(&mut ComponentWorkspace, &mut Result<()>)> = ws.iter_mut().zip(out.iter_mut()).collect();
            par::for_each_mut(exec, &mut pairs, |_, (w, r)| {
                **r = w.append_samples(samples.iter_range(range.clone()));
            });
            out
        };
        results.into_iter().collect()
    }

    /// Solves every component, warm-starting from `previous` when given.
    pub fn fit(&self, previous: Option<&TriangularMap>, exec: Execution) -> Result<FitResult> {
        if self.num_samples() == 0 {
            return Err(Error::InsufficientSamples { needed: 1, found: 0 });
        }
        let warm: Vec<Option<&[f64]>> = (0..self.dim())
            .map(|i| {
                previous
                    .filter(|p| p.dim() == self.dim() && p.family() == self.family)
                    .map(|p| &p.components()[i])
                    .filter(|c| c.index_set() == self.workspaces[i].index_set())
                    .map(MapComponent::coefficients)
            })
            .collect();
        let solved = par::map_indices(exec, self.dim(), |i| {
            let ws = &self.workspaces[i];
            let rep = ws.solve(&self.config, warm[i]).map_err(|e| Error::Fit {
                component: i,
                source: Box::new(e),
            })?;
            let min_d = ws.min_diagonal_derivative(&rep.coefficients);
            if !(min_d > self.config.lambda_min) {
                return Err(Error::Fit {
                    component: i,
                    source: Box::new(Error::Monotonicity {
                        component: i,
                        point: Vec::new(),
                        derivative: min_d,
                    }),
                });
            }
            Ok(rep)
        });
        let reports = solved.into_iter().collect::<Result<Vec<_>>>()?;
        let comps = reports
            .iter()
            .zip(&self.workspaces)
            .map(|(r, w)| MapComponent::new(w.index_set().clone(), r.coefficients.clone()))
            .collect::<Result<Vec<_>>>()?;
        let radius = match self.config.radius {
            RadiusPolicy::Unbounded => f64::INFINITY,
            RadiusPolicy::Fixed(r) => r,
            RadiusPolicy::Auto => {
                let m = self.workspaces.iter().map(|w| w.max_norm).fold(0.0, f64::max);
                if m > 0.0 { 10.0 * m } else { f64::INFINITY }
            }
        };
        let map = TriangularMap::new(self.family, comps, self.config.lambda_min, radius)?;
        Ok(FitResult { map, reports })
    }
}

/// Fits a map to `samples` from scratch.
pub fn fit_map(
    samples: &SampleMatrix,
    sets: Vec<MultiIndexSet>,
    family: PolynomialFamily,
    config: &OptimizerConfig,
    previous: Option<&TriangularMap>,
    exec: Execution,
) -> Result<FitResult> {
    if samples.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, found: 0 });
    }
    let mut opt = MapOptimizer::new(family, sets, *config)?;
    opt.append(samples, 0..samples.rows(), exec)?;
    opt.fit(previous, exec)
}

/// Average of `sum_i [T_i^2/2 - log dT_i/dtheta_i]` over `samples`: the
/// sample-average KL objective up to a constant.
pub fn kl_proxy(map: &TriangularMap, samples: &SampleMatrix) -> Result<f64> {
    let mut total = 0.0;
    for row in samples.iter() {
        let (r, ld) = map.forward_with_log_det(row)?;
        total += 0.5 * r.iter().map(|v| v * v).sum::<f64>() - ld;
    }
    Ok(total / samples.rows() as f64)
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
