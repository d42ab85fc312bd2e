//! Lower-triangular polynomial transport maps.
//!
//! Component `i` of the map is `T_i(theta) = sum_j gamma_{i,j} psi_j(theta)`
//! over the multi-index set `J_i`, and depends on `theta[..=i]` only. When an
//! extension radius `R` is finite, each component is continued linearly
//! outside the ball of radius `R` in its own input space `R^{i+1}`:
//!
//! ```text
//! T^R_i(x) = T_i(w) + d_i (|x| - R),   w = R x/|x|,   d_i = (x/|x|) . grad T_i(w)
//! ```
//!
//! which bounds the map's derivatives while keeping the Jacobian lower
//! triangular.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::polybasis::{MultiIndex, MultiIndexSet, PolynomialFamily, UnivariateTable};
use crate::target::{std_normal_log_density, Target};

/// Default lower bound on the diagonal derivatives enforced while fitting.
pub const DEFAULT_LAMBDA_MIN: f64 = 1e-8;

const MAX_BRACKET_EXPANSIONS: usize = 64;
const BISECTION_ITERS: usize = 40;
const NEWTON_POLISH_STEPS: usize = 5;
const EXTRA_BISECTION_ITERS: usize = 200;
const INVERSION_TOL: f64 = 1e-10;

/// One scalar component of the map with its basis and coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapComponent {
    set: MultiIndexSet,
    coeffs: Vec<f64>,
}

impl MapComponent {
    pub fn new(set: MultiIndexSet, coeffs: Vec<f64>) -> Result<Self> {
        check_dim(set.len(), coeffs.len())?;
        if let Some(bad) = coeffs.iter().find(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite coefficient {bad} in component {}",
                set.component()
            )));
        }
        Ok(MapComponent { set, coeffs })
    }

    pub fn index_set(&self) -> &MultiIndexSet {
        &self.set
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    fn active(&self) -> usize {
        self.set.component() + 1
    }

    fn table(&self, family: PolynomialFamily, x: &[f64]) -> UnivariateTable {
        UnivariateTable::new(family, &x[..self.active()], self.set.max_degree() as usize)
    }

    fn raw_value(&self, tab: &UnivariateTable) -> f64 {
        let a = self.active();
        self.set
            .indices()
            .iter()
            .zip(&self.coeffs)
            .map(|(j, c)| c * tab.psi(j, a))
            .sum()
    }

    fn raw_partial(&self, tab: &UnivariateTable, m: usize) -> f64 {
        let a = self.active();
        self.set
            .indices()
            .iter()
            .zip(&self.coeffs)
            .map(|(j, c)| c * tab.dpsi(j, a, m))
            .sum()
    }

    fn raw_gradient(&self, tab: &UnivariateTable) -> Vec<f64> {
        (0..self.active()).map(|m| self.raw_partial(tab, m)).collect()
    }

    /// Row-major `(i+1) x (i+1)` Hessian of the raw polynomial.
    fn raw_hessian(&self, tab: &UnivariateTable) -> Vec<f64> {
        let a = self.active();
        let mut h = vec![0.0; a * a];
        for (j, c) in self.set.indices().iter().zip(&self.coeffs) {
            if *c == 0.0 {
                continue;
            }
            for p in 0..a {
                for q in p..a {
                    let v = c * tab.d2psi(j, a, p, q);
                    h[p * a + q] += v;
                    if p != q {
                        h[q * a + p] += v;
                    }
                }
            }
        }
        h
    }

    /// Coefficients of the univariate slice `t -> T_i(x_0..x_{i-1}, t)` in the
    /// family basis, i.e. `a_d = sum_{j: j_i = d} gamma_j prod_{k<i} phi_{j_k}(x_k)`.
    fn slice_coefficients(&self, family: PolynomialFamily, prefix: &[f64]) -> Vec<f64> {
        let i = self.set.component();
        let maxd = self.set.max_degree() as usize;
        let tab = UnivariateTable::new(family, prefix, maxd);
        let mut a = vec![0.0; maxd + 1];
        for (j, c) in self.set.indices().iter().zip(&self.coeffs) {
            let e = j.entries();
            let mut p = *c;
            for (k, &d) in e.iter().enumerate().take(i) {
                if d > 0 {
                    p *= tab.val(k, d);
                }
            }
            a[e[i] as usize] += p;
        }
        a
    }
}

/// Evaluated component at one point, including the extension rule.
#[derive(Debug, Clone, Copy)]
struct ComponentEval {
    value: f64,
    diag: f64,
}

/// Lower-triangular map `T(theta; gamma)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangularMap {
    family: PolynomialFamily,
    components: Vec<MapComponent>,
    lambda_min: f64,
    /// Extension radius; `f64::INFINITY` disables the linear extension.
    radius: f64,
}

impl TriangularMap {
    pub fn new(
        family: PolynomialFamily,
        components: Vec<MapComponent>,
        lambda_min: f64,
        radius: f64,
    ) -> Result<Self> {
        let n = components.len();
        if n == 0 {
            return Err(Error::InvalidArgument("map needs at least one component".into()));
        }
        for (i, c) in components.iter().enumerate() {
            if c.set.component() != i || c.set.dim() != n {
                return Err(Error::IndexSetMismatch(format!(
                    "slot {i} holds a set for component {} of dimension {}",
                    c.set.component(),
                    c.set.dim()
                )));
            }
        }
        if !(lambda_min > 0.0) {
            return Err(Error::InvalidArgument(format!("lambda_min must be positive, got {lambda_min}")));
        }
        if !(radius > 0.0) {
            return Err(Error::InvalidArgument(format!("radius must be positive, got {radius}")));
        }
        Ok(TriangularMap {
            family,
            components,
            lambda_min,
            radius,
        })
    }

    /// Builds the identity map over the given index sets.
    pub fn identity(sets: Vec<MultiIndexSet>, family: PolynomialFamily) -> Result<Self> {
        let comps = sets
            .into_iter()
            .enumerate()
            .map(|(i, set)| {
                let coeffs = identity_coefficients(&set, i)?;
                MapComponent::new(set, coeffs)
            })
            .collect::<Result<Vec<_>>>()?;
        TriangularMap::new(family, comps, DEFAULT_LAMBDA_MIN, f64::INFINITY)
    }

    pub fn with_radius(mut self, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::InvalidArgument(format!("radius must be positive, got {radius}")));
        }
        self.radius = radius;
        Ok(self)
    }

    pub fn with_lambda_min(mut self, lambda_min: f64) -> Result<Self> {
        if !(lambda_min > 0.0) {
            return Err(Error::InvalidArgument(format!("lambda_min must be positive, got {lambda_min}")));
        }
        self.lambda_min = lambda_min;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn family(&self) -> PolynomialFamily {
        self.family
    }

    pub fn components(&self) -> &[MapComponent] {
        &self.components
    }

    pub fn lambda_min(&self) -> f64 {
        self.lambda_min
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn index_sets(&self) -> Vec<MultiIndexSet> {
        self.components.iter().map(|c| c.set.clone()).collect()
    }

    fn eval_component(&self, i: usize, x: &[f64]) -> ComponentEval {
        let comp = &self.components[i];
        let x = &x[..=i];
        let rho = norm(x);
        if rho <= self.radius {
            let tab = comp.table(self.family, x);
            return ComponentEval {
                value: comp.raw_value(&tab),
                diag: comp.raw_partial(&tab, i),
            };
        }
        let r = self.radius;
        let u: Vec<f64> = x.iter().map(|v| v / rho).collect();
        let w: Vec<f64> = u.iter().map(|v| v * r).collect();
        let tab = comp.table(self.family, &w);
        let tw = comp.raw_value(&tab);
        let g = comp.raw_gradient(&tab);
        let d = dot(&u, &g);
        let value = tw + d * (rho - r);
        let diag = self.extension_partial(comp, &tab, &u, &g, d, rho, i);
        ComponentEval { value, diag }
    }

    /// `d T^R_i / d x_m` outside the ball.
    #[allow(clippy::too_many_arguments)]
    fn extension_partial(
        &self,
        comp: &MapComponent,
        tab: &UnivariateTable,
        u: &[f64],
        g: &[f64],
        d: f64,
        rho: f64,
        m: usize,
    ) -> f64 {
        let r = self.radius;
        let a = u.len();
        let h = comp.raw_hessian(tab);
        // v = e_m - u u_m  (rho * du/dx_m)
        let v: Vec<f64> = (0..a)
            .map(|k| if k == m { 1.0 } else { 0.0 } - u[k] * u[m])
            .collect();
        let gv = dot(g, &v);
        let mut uhv = 0.0;
        for p in 0..a {
            for q in 0..a {
                uhv += u[p] * h[p * a + q] * v[q];
            }
        }
        r * gv / rho + (gv / rho + r * uhv / rho) * (rho - r) + d * u[m]
    }

    /// Full row `d T_i / d x_m`, `m <= i`, including the extension rule.
    fn component_gradient(&self, i: usize, x: &[f64]) -> Vec<f64> {
        let comp = &self.components[i];
        let x = &x[..=i];
        let rho = norm(x);
        if rho <= self.radius {
            let tab = comp.table(self.family, x);
            return comp.raw_gradient(&tab);
        }
        let u: Vec<f64> = x.iter().map(|v| v / rho).collect();
        let w: Vec<f64> = u.iter().map(|v| v * self.radius).collect();
        let tab = comp.table(self.family, &w);
        let g = comp.raw_gradient(&tab);
        let d = dot(&u, &g);
        (0..=i)
            .map(|m| self.extension_partial(comp, &tab, &u, &g, d, rho, m))
            .collect()
    }

    /// `T(theta)`.
    pub fn forward(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), theta.len())?;
        Ok((0..self.dim()).map(|i| self.eval_component(i, theta).value).collect())
    }

    /// Diagonal of the Jacobian, `dT_i/dtheta_i`.
    pub fn jacobian_diag(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), theta.len())?;
        Ok((0..self.dim()).map(|i| self.eval_component(i, theta).diag).collect())
    }

    /// Forward image and log-determinant together, sharing evaluations.
    pub fn forward_with_log_det(&self, theta: &[f64]) -> Result<(Vec<f64>, f64)> {
        check_dim(self.dim(), theta.len())?;
        let mut out = Vec::with_capacity(self.dim());
        let mut ld = 0.0;
        for i in 0..self.dim() {
            let e = self.eval_component(i, theta);
            if !(e.diag > 0.0) {
                return Err(Error::Monotonicity {
                    component: i,
                    point: theta.to_vec(),
                    derivative: e.diag,
                });
            }
            ld += e.diag.ln();
            out.push(e.value);
        }
        Ok((out, ld))
    }

    /// `sum_i log dT_i/dtheta_i`; errors if any diagonal derivative is not positive.
    pub fn log_det_jacobian(&self, theta: &[f64]) -> Result<f64> {
        let diag = self.jacobian_diag(theta)?;
        let mut ld = 0.0;
        for (i, d) in diag.into_iter().enumerate() {
            if !(d > 0.0) {
                return Err(Error::Monotonicity {
                    component: i,
                    point: theta.to_vec(),
                    derivative: d,
                });
            }
            ld += d.ln();
        }
        Ok(ld)
    }

    /// Lower-triangular Jacobian, row-major `n x n`.
    pub fn jacobian(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), theta.len())?;
        let n = self.dim();
        let mut jac = vec![0.0; n * n];
        for i in 0..n {
            for (m, v) in self.component_gradient(i, theta).into_iter().enumerate() {
                jac[i * n + m] = v;
            }
        }
        Ok(jac)
    }

    /// Solves `T(theta) = r` by `n` sequential one-dimensional solves.
    pub fn inverse(&self, r: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), r.len())?;
        let mut theta = vec![0.0; self.dim()];
        for i in 0..self.dim() {
            theta[i] = self.invert_component(i, &theta[..i], r[i], 0.0, 1.0)?;
        }
        Ok(theta)
    }

    /// Like [`TriangularMap::inverse`], but each bracket grows outward from
    /// `hint`. A fitted map is only constrained to be monotone near its
    /// samples; starting from a nearby point keeps the solve on that branch.
    pub fn inverse_near(&self, r: &[f64], hint: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), r.len())?;
        check_dim(self.dim(), hint.len())?;
        let mut theta = vec![0.0; self.dim()];
        for i in 0..self.dim() {
            let c = hint[i];
            if !c.is_finite() {
                return Err(Error::InvalidArgument(format!("non-finite inversion hint {c}")));
            }
            theta[i] = self.invert_component(i, &theta[..i], r[i], c, 1e-3 * c.abs().max(1.0))?;
        }
        Ok(theta)
    }

    fn invert_component(&self, i: usize, prefix: &[f64], target: f64, center: f64, half_width: f64) -> Result<f64> {
        let comp = &self.components[i];
        let poly = if self.radius.is_finite() {
            None
        } else {
            Some(comp.slice_coefficients(self.family, prefix))
        };
        let maxd = comp.set.max_degree() as usize;
        let mut scratch = vec![0.0; maxd + 1];
        let mut x = prefix.to_vec();
        x.push(0.0);
        // (residual, derivative) at t
        let mut eval = |t: f64| -> (f64, f64) {
            match &poly {
                Some(a) => {
                    self.family.fill_values(t, &mut scratch);
                    let mut f = 0.0;
                    let mut df = 0.0;
                    for d in 0..a.len() {
                        f += a[d] * scratch[d];
                        if d > 0 {
                            df += a[d] * d as f64 * scratch[d - 1];
                        }
                    }
                    (f - target, df)
                }
                None => {
                    x[i] = t;
                    let e = self.eval_component(i, &x);
                    (e.value - target, e.diag)
                }
            }
        };
        let inv_err = |reason| Error::Inversion {
            component: i,
            value: target,
            reason,
        };

        let (mut lo, mut hi) = (center - half_width, center + half_width);
        let (mut flo, mut fhi) = (eval(lo).0, eval(hi).0);
        let mut width = 2.0 * half_width;
        let mut bracketed = false;
        for _ in 0..MAX_BRACKET_EXPANSIONS {
            if !flo.is_finite() || !fhi.is_finite() {
                return Err(inv_err("non-finite map value while bracketing"));
            }
            if flo > 0.0 && fhi < 0.0 {
                let mut point = prefix.to_vec();
                point.push(0.5 * (lo + hi));
                return Err(Error::Monotonicity {
                    component: i,
                    point,
                    derivative: (fhi - flo) / (hi - lo),
                });
            }
            if flo <= 0.0 && fhi >= 0.0 {
                bracketed = true;
                break;
            }
            if flo > 0.0 {
                hi = lo;
                fhi = flo;
                lo -= width;
                flo = eval(lo).0;
            } else {
                lo = hi;
                flo = fhi;
                hi += width;
                fhi = eval(hi).0;
            }
            width *= 2.0;
        }
        if !bracketed {
            return Err(inv_err("bracket not found"));
        }
        if flo == 0.0 {
            return self.finish_inversion(i, prefix, lo, eval(lo).1);
        }
        if fhi == 0.0 {
            return self.finish_inversion(i, prefix, hi, eval(hi).1);
        }

        let bisect = |lo: &mut f64, hi: &mut f64, iters: usize, eval: &mut dyn FnMut(f64) -> (f64, f64)| {
            for _ in 0..iters {
                let mid = 0.5 * (*lo + *hi);
                if mid <= *lo || mid >= *hi {
                    break;
                }
                if eval(mid).0 <= 0.0 {
                    *lo = mid;
                } else {
                    *hi = mid;
                }
            }
        };
        bisect(&mut lo, &mut hi, BISECTION_ITERS, &mut eval);

        let mut t = 0.5 * (lo + hi);
        let (mut f, mut df) = eval(t);
        for _ in 0..NEWTON_POLISH_STEPS {
            if f.abs() <= INVERSION_TOL * 1e-3 {
                break;
            }
            if f < 0.0 {
                lo = t;
            } else {
                hi = t;
            }
            let mut next = if df > 0.0 { t - f / df } else { f64::NAN };
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            t = next;
            (f, df) = eval(t);
        }
        if f.abs() > INVERSION_TOL {
            if f < 0.0 {
                lo = lo.max(t);
            } else {
                hi = hi.min(t);
            }
            bisect(&mut lo, &mut hi, EXTRA_BISECTION_ITERS, &mut eval);
            let (flo, dlo) = eval(lo);
            let (fhi, dhi) = eval(hi);
            (t, f, df) = if flo.abs() <= fhi.abs() {
                (lo, flo, dlo)
            } else {
                (hi, fhi, dhi)
            };
        }
        if f.abs() > INVERSION_TOL * target.abs().max(1.0) {
            return Err(inv_err("tolerance not reached"));
        }
        self.finish_inversion(i, prefix, t, df)
    }

    fn finish_inversion(&self, i: usize, prefix: &[f64], t: f64, df: f64) -> Result<f64> {
        if !(df > 0.0) {
            let mut point = prefix.to_vec();
            point.push(t);
            return Err(Error::Monotonicity {
                component: i,
                point,
                derivative: df,
            });
        }
        Ok(t)
    }

    /// `log p(T(theta)) + log det DT(theta)` with `p` the standard normal.
    pub fn pullback_log_density(&self, theta: &[f64]) -> Result<f64> {
        let (r, ld) = self.forward_with_log_det(theta)?;
        Ok(std_normal_log_density(&r) + ld)
    }

    /// `log pi(T^{-1}(r)) - log det DT(T^{-1}(r))`.
    pub fn pushforward_log_density<T: Target + ?Sized>(&self, target: &T, r: &[f64]) -> Result<f64> {
        let theta = self.inverse(r)?;
        let ld = self.log_det_jacobian(&theta)?;
        Ok(target.log_density(&theta) - ld)
    }

    /// Gradient of the pushforward log-density with respect to `r`.
    pub fn pushforward_gradient<T: Target + ?Sized>(&self, target: &T, r: &[f64]) -> Result<Vec<f64>> {
        let theta = self.inverse(r)?;
        let grad = target.grad_log_density(&theta).ok_or(Error::GradientUnavailable)?;
        self.reference_gradient_at(&theta, &grad)
    }

    /// Reference-space gradient given the preimage `theta` and
    /// `grad_theta = grad log pi(theta)`.
    ///
    /// Computes `(grad_theta - sum_i H_i / dT_i/dtheta_i) (DT)^{-1}` where
    /// `H_i` is the row of mixed second derivatives `d^2 T_i / dtheta_m dtheta_i`.
    pub fn reference_gradient_at(&self, theta: &[f64], grad_theta: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        check_dim(n, theta.len())?;
        check_dim(n, grad_theta.len())?;
        let mut g = grad_theta.to_vec();
        let mut jac = vec![0.0; n * n];
        for i in 0..n {
            let comp = &self.components[i];
            let x = &theta[..=i];
            if norm(x) > self.radius {
                return Err(Error::OutsideRadius);
            }
            let tab = comp.table(self.family, x);
            let grad_i = comp.raw_gradient(&tab);
            let diag = grad_i[i];
            if !(diag > 0.0) {
                return Err(Error::Monotonicity {
                    component: i,
                    point: theta.to_vec(),
                    derivative: diag,
                });
            }
            for (m, v) in grad_i.iter().enumerate() {
                jac[i * n + m] = *v;
            }
            let a = comp.active();
            for (m, gm) in g.iter_mut().enumerate().take(i + 1) {
                let h: f64 = comp
                    .set
                    .indices()
                    .iter()
                    .zip(&comp.coeffs)
                    .map(|(j, c)| c * tab.d2psi(j, a, m, i))
                    .sum();
                *gm -= h / diag;
            }
        }
        // Row vector times DT^{-1}: solve DT^T y = g, DT^T is upper triangular.
        let mut y = vec![0.0; n];
        for m in (0..n).rev() {
            let mut s = g[m];
            for i in m + 1..n {
                s -= jac[i * n + m] * y[i];
            }
            y[m] = s / jac[m * n + m];
        }
        Ok(y)
    }

    /// Serializes to the line-oriented text format read by [`TriangularMap::from_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# triangular transport map");
        let _ = writeln!(s, "family {}", self.family.name());
        let _ = writeln!(s, "dim {}", self.dim());
        let _ = writeln!(s, "lambda_min {}", fmt_f64(self.lambda_min));
        let _ = writeln!(s, "radius {}", fmt_f64(self.radius));
        for (i, c) in self.components.iter().enumerate() {
            let _ = writeln!(s, "component {i} {}", c.set.len());
            for (j, g) in c.set.indices().iter().zip(&c.coeffs) {
                let _ = writeln!(s, "{j} {}", fmt_f64(*g));
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(n, l)| (n + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let mut header = |key: &str| -> Result<(usize, String)> {
            let (n, line) = lines.next().ok_or(Error::Parse {
                line: 0,
                message: format!("missing '{key}' line"),
            })?;
            let mut parts = line.splitn(2, char::is_whitespace);
            match (parts.next(), parts.next()) {
                (Some(k), Some(v)) if k == key => Ok((n, v.trim().to_string())),
                _ => Err(Error::Parse {
                    line: n,
                    message: format!("expected '{key} <value>'"),
                }),
            }
        };
        let (n, fam) = header("family")?;
        let family = PolynomialFamily::from_name(&fam).ok_or(Error::Parse {
            line: n,
            message: format!("unknown family '{fam}'"),
        })?;
        let (n, dim) = header("dim")?;
        let dim: usize = parse_tok(n, &dim)?;
        let (n, lm) = header("lambda_min")?;
        let lambda_min: f64 = parse_tok(n, &lm)?;
        let (n, rad) = header("radius")?;
        let radius: f64 = parse_tok(n, &rad)?;

        let mut comps = Vec::with_capacity(dim);
        for i in 0..dim {
            let (n, line) = lines.next().ok_or(Error::Parse {
                line: 0,
                message: format!("missing component {i}"),
            })?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 3 || toks[0] != "component" || parse_tok::<usize>(n, toks[1])? != i {
                return Err(Error::Parse {
                    line: n,
                    message: format!("expected 'component {i} <terms>'"),
                });
            }
            let terms: usize = parse_tok(n, toks[2])?;
            let mut indices = Vec::with_capacity(terms);
            let mut coeffs = Vec::with_capacity(terms);
            for _ in 0..terms {
                let (n, line) = lines.next().ok_or(Error::Parse {
                    line: 0,
                    message: format!("component {i} is truncated"),
                })?;
                let toks: Vec<&str> = line.split_whitespace().collect();
                if toks.len() != dim + 1 {
                    return Err(Error::Parse {
                        line: n,
                        message: format!("expected {dim} index entries and a coefficient"),
                    });
                }
                let entries = toks[..dim]
                    .iter()
                    .map(|t| parse_tok::<u32>(n, t))
                    .collect::<Result<Vec<_>>>()?;
                indices.push(MultiIndex::new(entries));
                coeffs.push(parse_tok::<f64>(n, toks[dim])?);
            }
            // Keep the file's term order so coefficients stay aligned.
            let set = MultiIndexSet::from_indices(i, dim, indices.clone())?;
            let mut aligned = vec![0.0; set.len()];
            if set.len() != indices.len() {
                return Err(Error::Parse {
                    line: n,
                    message: format!("component {i} has duplicate multi-indices"),
                });
            }
            for (j, c) in indices.iter().zip(coeffs) {
                aligned[set.position(j).expect("member")] = c;
            }
            comps.push(MapComponent::new(set, aligned)?);
        }
        if let Some((n, _)) = lines.next() {
            return Err(Error::Parse {
                line: n,
                message: "trailing content after last component".into(),
            });
        }
        TriangularMap::new(family, comps, lambda_min, radius)
    }
}

/// Coefficients of the identity for component `i`: one on the unit index `e_i`.
pub fn identity_coefficients(set: &MultiIndexSet, i: usize) -> Result<Vec<f64>> {
    let unit = MultiIndex::unit(set.dim(), i);
    let pos = set
        .position(&unit)
        .ok_or(Error::MissingIdentityTerm { component: i })?;
    let mut c = vec![0.0; set.len()];
    c[pos] = 1.0;
    Ok(c)
}

/// 17 significant digits; round-trips every finite `f64`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:.16e}")
    }
}

fn parse_tok<T: std::str::FromStr>(line: usize, tok: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    tok.parse::<T>().map_err(|e| Error::Parse {
        line,
        message: format!("cannot parse '{tok}': {e}"),
    })
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polybasis::{build_diagonal, build_total_order};
    use proptest::prelude::*;

    const H: PolynomialFamily = PolynomialFamily::Hermite;
    const M: PolynomialFamily = PolynomialFamily::Monomial;

    /// 1-D map from monomial coefficients `c_0 + c_1 t + c_2 t^2 + ...`.
    fn poly1d(coeffs: &[f64]) -> TriangularMap {
        let set = build_diagonal(0, coeffs.len() as u32 - 1, 1);
        TriangularMap::new(
            M,
            vec![MapComponent::new(set, coeffs.to_vec()).unwrap()],
            DEFAULT_LAMBDA_MIN,
            f64::INFINITY,
        )
        .unwrap()
    }

    fn linear2(a: [[f64; 2]; 2]) -> TriangularMap {
        let c0 = MapComponent::new(build_total_order(0, 1, 2), vec![0.0, a[0][0]]).unwrap();
        // total order (1, 2): [(0,0), (0,1), (1,0)]
        let c1 = MapComponent::new(build_total_order(1, 1, 2), vec![0.0, a[1][1], a[1][0]]).unwrap();
        TriangularMap::new(H, vec![c0, c1], DEFAULT_LAMBDA_MIN, f64::INFINITY).unwrap()
    }

    /// A fixed nonlinear, monotone 2-D cubic map.
    pub(crate) fn cubic2() -> TriangularMap {
        let s0 = build_total_order(0, 3, 2);
        let s1 = build_total_order(1, 3, 2);
        let mut c0 = vec![0.0; s0.len()];
        c0[s0.position(&MultiIndex::new(vec![0, 0])).unwrap()] = 0.2;
        c0[s0.position(&MultiIndex::new(vec![1, 0])).unwrap()] = 1.1;
        c0[s0.position(&MultiIndex::new(vec![3, 0])).unwrap()] = 0.05;
        let mut c1 = vec![0.0; s1.len()];
        c1[s1.position(&MultiIndex::new(vec![0, 1])).unwrap()] = 0.9;
        c1[s1.position(&MultiIndex::new(vec![2, 0])).unwrap()] = 0.5;
        c1[s1.position(&MultiIndex::new(vec![1, 1])).unwrap()] = 0.1;
        c1[s1.position(&MultiIndex::new(vec![0, 3])).unwrap()] = 0.04;
        TriangularMap::new(
            H,
            vec![MapComponent::new(s0, c0).unwrap(), MapComponent::new(s1, c1).unwrap()],
            DEFAULT_LAMBDA_MIN,
            f64::INFINITY,
        )
        .unwrap()
    }

    #[test]
    fn identity_examples() {
        let sets = vec![build_total_order(0, 3, 2), build_total_order(1, 3, 2)];
        let id = TriangularMap::identity(sets.clone(), H).unwrap();
        assert_eq!(id.forward(&[0.3, -1.2]).unwrap(), vec![0.3, -1.2]);
        assert_eq!(id.log_det_jacobian(&[4.0, -7.0]).unwrap(), 0.0);
        let c = id.components()[1].coefficients();
        assert_eq!(c.len(), 10);
        assert_eq!(c.iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(c[sets[1].position(&MultiIndex::new(vec![0, 1])).unwrap()], 1.0);
        assert!(matches!(
            TriangularMap::identity(vec![build_diagonal(0, 0, 1)], H),
            Err(Error::MissingIdentityTerm { component: 0 })
        ));
        let with_ext = id.clone().with_radius(0.5).unwrap();
        let th = [3.0, -4.0];
        let out = with_ext.forward(&th).unwrap();
        assert!((out[0] - 3.0).abs() < 1e-12 && (out[1] + 4.0).abs() < 1e-12);
    }

    #[test]
    fn forward_examples() {
        let m = poly1d(&[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(m.forward(&[1.0]).unwrap(), vec![2.0]);
        let sq = poly1d(&[0.0, 0.0, 1.0]).with_radius(2.0).unwrap();
        assert!((sq.forward(&[3.0]).unwrap()[0] - 8.0).abs() < 1e-12);
        assert!(m.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn jacobian_and_log_det_examples() {
        let m = poly1d(&[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(m.jacobian_diag(&[2.0]).unwrap(), vec![13.0]);
        assert!((m.log_det_jacobian(&[1.0]).unwrap() - 4f64.ln()).abs() < 1e-15);
        let lin = linear2([[2.0, 0.0], [0.0, 3.0]]);
        assert!((lin.log_det_jacobian(&[0.1, 0.2]).unwrap() - 6f64.ln()).abs() < 1e-15);
        let constant = poly1d(&[1.0, 0.0]);
        assert_eq!(constant.jacobian_diag(&[0.3]).unwrap(), vec![0.0]);
        assert!(matches!(
            constant.log_det_jacobian(&[0.3]),
            Err(Error::Monotonicity { component: 0, .. })
        ));
    }

    #[test]
    fn inverse_examples() {
        let id = TriangularMap::identity(vec![build_total_order(0, 1, 2), build_total_order(1, 1, 2)], H).unwrap();
        let th = id.inverse(&[5.0, -3.0]).unwrap();
        assert!((th[0] - 5.0).abs() < 1e-12 && (th[1] + 3.0).abs() < 1e-12);
        let m = poly1d(&[0.0, 1.0, 0.0, 1.0]);
        assert!((m.inverse(&[2.0]).unwrap()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inverse_near_stays_on_the_hinted_branch() {
        // t^3 - 3t vanishes at -sqrt(3), 0 and sqrt(3)
        let m = poly1d(&[0.0, -3.0, 0.0, 1.0]);
        let s3 = 3f64.sqrt();
        assert!((m.inverse_near(&[0.0], &[2.0]).unwrap()[0] - s3).abs() < 1e-12);
        assert!((m.inverse_near(&[0.0], &[-2.0]).unwrap()[0] + s3).abs() < 1e-12);
        assert!(m.inverse_near(&[0.0], &[f64::NAN]).is_err());
        assert!(m.inverse_near(&[0.0], &[1.0, 2.0]).is_err());
        let c = cubic2();
        let th = [0.4, -1.3];
        let back = c.inverse_near(&c.forward(&th).unwrap(), &[0.0, 0.0]).unwrap();
        assert!((back[0] - th[0]).abs() < 1e-12 && (back[1] - th[1]).abs() < 1e-12);
    }

    #[test]
    fn inverse_detects_decreasing_slice() {
        let m = poly1d(&[0.0, -1.0]);
        assert!(matches!(m.inverse(&[0.5]), Err(Error::Monotonicity { .. })));
        // even polynomial: bracket around a point where the derivative vanishes
        let sq = poly1d(&[0.0, 0.0, 1.0]);
        assert!(sq.inverse(&[-1.0]).is_err());
    }

    #[test]
    fn pullback_examples() {
        let id = TriangularMap::identity(vec![build_total_order(0, 1, 1)], H).unwrap();
        let v = id.pullback_log_density(&[0.0]).unwrap();
        assert!((v + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
        let id2 = TriangularMap::identity(vec![build_total_order(0, 2, 2), build_total_order(1, 2, 2)], H).unwrap();
        let th = [0.4, -1.7];
        assert!((id2.pullback_log_density(&th).unwrap() - std_normal_log_density(&th)).abs() < 1e-15);
    }

    #[test]
    fn linear_pullback_is_gaussian() {
        // Sigma = L L^T with L = [[1,0],[0.5,0.8]]; T = L^{-1}
        let l = [[1.0, 0.0], [0.5, 0.8]];
        let det_l = l[0][0] * l[1][1];
        let linv = [[1.0 / l[0][0], 0.0], [-l[1][0] / (l[0][0] * l[1][1]), 1.0 / l[1][1]]];
        let map = linear2(linv);
        let sigma = [[1.0, 0.5], [0.5, 0.25 + 0.64]];
        let det = sigma[0][0] * sigma[1][1] - sigma[0][1] * sigma[1][0];
        assert!((det - det_l * det_l).abs() < 1e-14);
        let mut s = 11u64;
        for _ in 0..100 {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let a = ((s >> 11) as f64 / (1u64 << 53) as f64) * 8.0 - 4.0;
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let b = ((s >> 11) as f64 / (1u64 << 53) as f64) * 8.0 - 4.0;
            let q = (sigma[1][1] * a * a - 2.0 * sigma[0][1] * a * b + sigma[0][0] * b * b) / det;
            let exact = -(2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln() - 0.5 * q;
            assert!((map.pullback_log_density(&[a, b]).unwrap() - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn triangularity_is_bit_exact() {
        let m = cubic2();
        let a = m.forward(&[0.3, 0.7]).unwrap();
        let b = m.forward(&[0.3, -5.0]).unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        let mr = m.with_radius(1.5).unwrap();
        let a = mr.forward(&[1.2, 0.7]).unwrap();
        let b = mr.forward(&[1.2, -5.0]).unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
    }

    #[test]
    fn extension_is_continuous() {
        let m = cubic2().with_radius(2.0).unwrap();
        for k in 0..50 {
            let ang = k as f64 * 0.37;
            let u = [ang.cos(), ang.sin()];
            let inside: Vec<f64> = u.iter().map(|v| v * 2.0 * (1.0 - 1e-9)).collect();
            let outside: Vec<f64> = u.iter().map(|v| v * 2.0 * (1.0 + 1e-9)).collect();
            let a = m.forward(&inside).unwrap();
            let b = m.forward(&outside).unwrap();
            for i in 0..2 {
                assert!((a[i] - b[i]).abs() < 1e-6);
            }
        }
    }

    fn fd_check(m: &TriangularMap, th: &[f64]) {
        let h = 1e-6;
        let jac = m.jacobian(th).unwrap();
        let diag = m.jacobian_diag(th).unwrap();
        let n = th.len();
        for i in 0..n {
            for k in 0..n {
                let mut p = th.to_vec();
                let mut q = th.to_vec();
                p[k] += h;
                q[k] -= h;
                let fd = (m.forward(&p).unwrap()[i] - m.forward(&q).unwrap()[i]) / (2.0 * h);
                let an = jac[i * n + k];
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "i={i} k={k} fd={fd} an={an}");
                if i == k {
                    assert!((diag[i] - an).abs() <= 1e-12 * an.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let m = cubic2();
        fd_check(&m, &[0.3, -0.8]);
        fd_check(&m, &[1.9, 2.4]);
        let mr = m.with_radius(1.5).unwrap();
        fd_check(&mr, &[0.3, -0.8]);
        fd_check(&mr, &[2.9, 1.4]);
        fd_check(&mr, &[-3.1, -0.2]);
        fd_check(&mr, &[0.3, 4.0]);
    }

    /// Composite Simpson rule on `[a, b]` with `n` (even) intervals.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for k in 1..n {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + k as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn pullback_integrates_to_one() {
        for m in [poly1d(&[0.3, 1.0, 0.0, 0.2]), poly1d(&[-0.5, 0.7, 0.1, 0.05])] {
            let z = simpson(|t| m.pullback_log_density(&[t]).unwrap().exp(), -20.0, 20.0, 40_000);
            assert!((z - 1.0).abs() < 1e-6, "z = {z}");
        }
    }

    struct Quartic;
    impl Target for Quartic {
        fn dim(&self) -> usize {
            2
        }
        fn log_density(&self, t: &[f64]) -> f64 {
            -0.25 * t[0].powi(4) - 0.5 * (t[1] - t[0]).powi(2) + 0.3 * t[0]
        }
        fn grad_log_density(&self, t: &[f64]) -> Option<Vec<f64>> {
            Some(vec![-t[0].powi(3) + (t[1] - t[0]) + 0.3, -(t[1] - t[0])])
        }
        fn has_gradient(&self) -> bool {
            true
        }
    }

    #[test]
    fn pushforward_identity_and_linear() {
        let id = TriangularMap::identity(vec![build_total_order(0, 1, 2), build_total_order(1, 1, 2)], H).unwrap();
        let r = [0.4, -0.9];
        assert_eq!(id.pushforward_log_density(&Quartic, &r).unwrap(), Quartic.log_density(&r));
        let g = id.pushforward_gradient(&Quartic, &r).unwrap();
        assert_eq!(g, Quartic.grad_log_density(&r).unwrap());

        // T = A theta, gradient = grad log pi(A^{-1} r) A^{-1}
        let a = [[2.0, 0.0], [0.5, 1.5]];
        let lin = linear2(a);
        let th = [r[0] / 2.0, (r[1] - 0.5 * r[0] / 2.0) / 1.5];
        let gt = Quartic.grad_log_density(&th).unwrap();
        // A^{-1} = [[0.5, 0], [-1/6, 2/3]]
        let expect = [gt[0] * 0.5 + gt[1] * (-1.0 / 6.0), gt[1] * (2.0 / 3.0)];
        let got = lin.pushforward_gradient(&Quartic, &r).unwrap();
        assert!((got[0] - expect[0]).abs() < 1e-12 && (got[1] - expect[1]).abs() < 1e-12);
    }

    #[test]
    fn pushforward_gradient_matches_finite_differences() {
        let m = cubic2();
        for r in [[0.1, 0.2], [-1.3, 0.8], [2.0, -1.5]] {
            let g = m.pushforward_gradient(&Quartic, &r).unwrap();
            for k in 0..2 {
                let h = 1e-5;
                let mut p = r;
                let mut q = r;
                p[k] += h;
                q[k] -= h;
                let fd = (m.pushforward_log_density(&Quartic, &p).unwrap()
                    - m.pushforward_log_density(&Quartic, &q).unwrap())
                    / (2.0 * h);
                assert!((fd - g[k]).abs() <= 1e-5 * g[k].abs().max(1.0), "fd {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn gradient_outside_radius_is_refused() {
        let m = cubic2().with_radius(1.0).unwrap();
        let r = m.forward(&[3.0, 0.0]).unwrap();
        assert!(matches!(m.pushforward_gradient(&Quartic, &r), Err(Error::OutsideRadius)));
    }

    #[test]
    fn text_roundtrip_is_exact() {
        let m = cubic2().with_radius(7.25).unwrap();
        let back = TriangularMap::from_text(&m.to_text()).unwrap();
        assert_eq!(m, back);
        let unbounded = cubic2();
        assert_eq!(unbounded, TriangularMap::from_text(&unbounded.to_text()).unwrap());
        assert!(TriangularMap::from_text("family hermite\ndim 1\n").is_err());
        assert!(TriangularMap::from_text("family legendre\n").is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_inverse(a in -10.0f64..10.0, b in -10.0f64..10.0, ext in proptest::bool::ANY) {
            let m = if ext { cubic2().with_radius(3.0).unwrap() } else { cubic2() };
            let r = [a, b];
            let th = m.inverse(&r).unwrap();
            let back = m.forward(&th).unwrap();
            prop_assert!((back[0] - a).abs() < 1e-8 && (back[1] - b).abs() < 1e-8);
        }
    }
}
