//! Univariate polynomial families, tensor-product basis functions and the
//! lower-triangular multi-index sets that define each map component.
//!
//! Component indices are zero-based throughout: the set for component `i`
//! only contains multi-indices whose entries beyond position `i` are zero.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Univariate polynomial family used for every factor of a basis function.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolynomialFamily {
    /// Probabilists' Hermite polynomials, orthogonal under `exp(-x^2/2)`.
    #[default]
    Hermite,
    Monomial,
}

impl PolynomialFamily {
    pub fn name(self) -> &'static str {
        match self {
            PolynomialFamily::Hermite => "hermite",
            PolynomialFamily::Monomial => "monomial",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "hermite" => Some(PolynomialFamily::Hermite),
            "monomial" => Some(PolynomialFamily::Monomial),
            _ => None,
        }
    }

    /// Value of the degree-`degree` member at `x`.
    pub fn eval(self, degree: usize, x: f64) -> f64 {
        let mut v = vec![0.0; degree + 1];
        self.fill_values(x, &mut v);
        v[degree]
    }

    /// First derivative of the degree-`degree` member at `x`.
    pub fn eval_deriv(self, degree: usize, x: f64) -> f64 {
        if degree == 0 {
            return 0.0;
        }
        match self {
            PolynomialFamily::Hermite => degree as f64 * self.eval(degree - 1, x),
            PolynomialFamily::Monomial => degree as f64 * x.powi(degree as i32 - 1),
        }
    }

    /// Second derivative of the degree-`degree` member at `x`.
    pub fn eval_second_deriv(self, degree: usize, x: f64) -> f64 {
        if degree < 2 {
            return 0.0;
        }
        let k = degree as f64;
        match self {
            PolynomialFamily::Hermite => k * (k - 1.0) * self.eval(degree - 2, x),
            PolynomialFamily::Monomial => k * (k - 1.0) * x.powi(degree as i32 - 2),
        }
    }

    /// Writes the values of degrees `0..out.len()` at `x` into `out`.
    pub fn fill_values(self, x: f64, out: &mut [f64]) {
        if out.is_empty() {
            return;
        }
        out[0] = 1.0;
        if out.len() > 1 {
            out[1] = x;
        }
        for k in 1..out.len().saturating_sub(1) {
            out[k + 1] = match self {
                // He_{k+1} = x He_k - k He_{k-1}
                PolynomialFamily::Hermite => x * out[k] - k as f64 * out[k - 1],
                PolynomialFamily::Monomial => x * out[k],
            };
        }
    }

    /// Fills values, first and second derivatives for degrees `0..=max_degree`.
    /// Each output slice must have length `max_degree + 1`.
    pub fn fill_all(self, x: f64, vals: &mut [f64], d1: &mut [f64], d2: &mut [f64]) {
        self.fill_values(x, vals);
        let n = vals.len();
        for k in 0..n {
            let kf = k as f64;
            // Both families satisfy p_k' = k p_{k-1} (monomials trivially).
            d1[k] = if k >= 1 { kf * vals[k - 1] } else { 0.0 };
            d2[k] = if k >= 2 { kf * (kf - 1.0) * vals[k - 2] } else { 0.0 };
        }
    }
}

/// Multi-index `j = (j_1, ..., j_n)` selecting one tensor-product basis function.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MultiIndex(Vec<u32>);

impl MultiIndex {
    pub fn new(entries: Vec<u32>) -> Self {
        MultiIndex(entries)
    }

    pub fn zeros(dim: usize) -> Self {
        MultiIndex(vec![0; dim])
    }

    /// Unit multi-index with a one at position `k`.
    pub fn unit(dim: usize, k: usize) -> Self {
        let mut e = vec![0; dim];
        e[k] = 1;
        MultiIndex(e)
    }

    pub fn entries(&self) -> &[u32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn total_degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn max_entry(&self) -> u32 {
        self.0.iter().copied().max().unwrap_or(0)
    }

    /// Position of the last non-zero entry, if any.
    pub fn last_active(&self) -> Option<usize> {
        self.0.iter().rposition(|&e| e > 0)
    }

    fn graded_key(&self) -> (u32, &[u32]) {
        (self.total_degree(), &self.0)
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for e in &self.0 {
            if !first {
                f.write_str(" ")?;
            }
            write!(f, "{e}")?;
            first = false;
        }
        Ok(())
    }
}

/// `psi_j(theta) = prod_k phi_{j_k}(theta_k)`.
pub fn eval_multivariate(family: PolynomialFamily, j: &MultiIndex, theta: &[f64]) -> Result<f64> {
    check_dim(j.dim(), theta.len())?;
    Ok(j.0
        .iter()
        .zip(theta)
        .map(|(&d, &x)| family.eval(d as usize, x))
        .product())
}

/// `d psi_j / d theta_i`.
pub fn eval_multivariate_partial(
    family: PolynomialFamily,
    j: &MultiIndex,
    theta: &[f64],
    i: usize,
) -> Result<f64> {
    check_dim(j.dim(), theta.len())?;
    if i >= theta.len() {
        return Err(Error::DimensionMismatch {
            expected: theta.len(),
            found: i + 1,
        });
    }
    Ok(j.0
        .iter()
        .zip(theta)
        .enumerate()
        .map(|(k, (&d, &x))| {
            if k == i {
                family.eval_deriv(d as usize, x)
            } else {
                family.eval(d as usize, x)
            }
        })
        .product())
}

/// Which family of triangular index sets to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IndexSetKind {
    TotalOrder,
    NoMixed,
    Diagonal,
}

impl IndexSetKind {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "total-order" => Some(IndexSetKind::TotalOrder),
            "no-mixed" => Some(IndexSetKind::NoMixed),
            "diagonal" => Some(IndexSetKind::Diagonal),
            _ => None,
        }
    }

    pub fn build(self, component: usize, degree: u32, dim: usize) -> MultiIndexSet {
        match self {
            IndexSetKind::TotalOrder => build_total_order(component, degree, dim),
            IndexSetKind::NoMixed => build_no_mixed(component, degree, dim),
            IndexSetKind::Diagonal => build_diagonal(component, degree, dim),
        }
    }
}

/// Multi-index set `J_i` feeding map component `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiIndexSet {
    component: usize,
    dim: usize,
    indices: Vec<MultiIndex>,
}

impl MultiIndexSet {
    /// Builds a set from arbitrary members, sorting into graded lexicographic
    /// order and dropping duplicates. Members must respect triangularity.
    pub fn from_indices(component: usize, dim: usize, indices: Vec<MultiIndex>) -> Result<Self> {
        if component >= dim {
            return Err(Error::IndexSetMismatch(format!(
                "component {component} out of range for dimension {dim}"
            )));
        }
        for j in &indices {
            check_dim(dim, j.dim())?;
            if j.last_active().is_some_and(|k| k > component) {
                return Err(Error::IndexSetMismatch(format!(
                    "multi-index ({j}) is not lower triangular for component {component}"
                )));
            }
        }
        let unique: BTreeSet<MultiIndex> = indices.into_iter().collect();
        let mut indices: Vec<MultiIndex> = unique.into_iter().collect();
        indices.sort_by(|a, b| a.graded_key().cmp(&b.graded_key()));
        Ok(MultiIndexSet {
            component,
            dim,
            indices,
        })
    }

    pub fn empty(component: usize, dim: usize) -> Self {
        MultiIndexSet {
            component,
            dim,
            indices: Vec::new(),
        }
    }

    pub fn component(&self) -> usize {
        self.component
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[MultiIndex] {
        &self.indices
    }

    pub fn position(&self, j: &MultiIndex) -> Option<usize> {
        self.indices.iter().position(|m| m == j)
    }

    pub fn max_degree(&self) -> u32 {
        self.indices.iter().map(MultiIndex::max_entry).max().unwrap_or(0)
    }

    /// One line per multi-index, entries separated by spaces.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for j in &self.indices {
            s.push_str(&j.to_string());
            s.push('\n');
        }
        s
    }

    /// Parses the format written by [`MultiIndexSet::to_text`]. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn from_text(component: usize, dim: usize, text: &str) -> Result<Self> {
        let mut indices = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let entries = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<u32>().map_err(|e| Error::Parse {
                        line: lineno + 1,
                        message: format!("bad multi-index entry '{tok}': {e}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if entries.len() != dim {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: format!("expected {dim} entries, found {}", entries.len()),
                });
            }
            indices.push(MultiIndex(entries));
        }
        Self::from_indices(component, dim, indices)
    }
}

/// All multi-indices over the first `active` coordinates with total degree at
/// most `degree`, padded with zeros to length `dim`.
fn enumerate_bounded(active: usize, degree: u32, dim: usize) -> Vec<MultiIndex> {
    fn rec(pos: usize, active: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<MultiIndex>) {
        if pos == active {
            out.push(MultiIndex(cur.clone()));
            return;
        }
        for d in 0..=left {
            cur[pos] = d;
            rec(pos + 1, active, left - d, cur, out);
        }
        cur[pos] = 0;
    }
    let mut out = Vec::new();
    let mut cur = vec![0; dim];
    rec(0, active, degree, &mut cur, &mut out);
    out
}

/// Total-order set: `||j||_1 <= degree`, `j_k = 0` for `k > component`.
pub fn build_total_order(component: usize, degree: u32, dim: usize) -> MultiIndexSet {
    assert!(component < dim, "component {component} out of range for dimension {dim}");
    let indices = enumerate_bounded(component + 1, degree, dim);
    MultiIndexSet::from_indices(component, dim, indices).expect("triangular by construction")
}

/// Total-order set with every mixed term removed.
pub fn build_no_mixed(component: usize, degree: u32, dim: usize) -> MultiIndexSet {
    assert!(component < dim, "component {component} out of range for dimension {dim}");
    let mut indices = vec![MultiIndex::zeros(dim)];
    for k in 0..=component {
        for d in 1..=degree {
            let mut e = vec![0; dim];
            e[k] = d;
            indices.push(MultiIndex(e));
        }
    }
    MultiIndexSet::from_indices(component, dim, indices).expect("triangular by construction")
}

/// Diagonal set: only powers of coordinate `component`.
pub fn build_diagonal(component: usize, degree: u32, dim: usize) -> MultiIndexSet {
    assert!(component < dim, "component {component} out of range for dimension {dim}");
    let indices = (0..=degree)
        .map(|d| {
            let mut e = vec![0; dim];
            e[component] = d;
            MultiIndex(e)
        })
        .collect();
    MultiIndexSet::from_indices(component, dim, indices).expect("triangular by construction")
}

/// Deduplicated union of two sets for the same component.
pub fn union_sets(a: &MultiIndexSet, b: &MultiIndexSet) -> Result<MultiIndexSet> {
    if a.component != b.component || a.dim != b.dim {
        return Err(Error::IndexSetMismatch(format!(
            "cannot union sets for component {} (dim {}) and component {} (dim {})",
            a.component, a.dim, b.component, b.dim
        )));
    }
    let members = a.indices.iter().chain(&b.indices).cloned().collect();
    MultiIndexSet::from_indices(a.component, a.dim, members)
}

/// Per-coordinate tables of univariate values and derivatives at one point.
#[derive(Debug, Clone)]
pub(crate) struct UnivariateTable {
    stride: usize,
    vals: Vec<f64>,
    d1: Vec<f64>,
    d2: Vec<f64>,
}

impl UnivariateTable {
    pub(crate) fn new(family: PolynomialFamily, theta: &[f64], max_degree: usize) -> Self {
        let stride = max_degree + 1;
        let mut t = UnivariateTable {
            stride,
            vals: vec![0.0; stride * theta.len()],
            d1: vec![0.0; stride * theta.len()],
            d2: vec![0.0; stride * theta.len()],
        };
        for (k, &x) in theta.iter().enumerate() {
            let r = k * stride..(k + 1) * stride;
            family.fill_all(
                x,
                &mut t.vals[r.clone()],
                &mut t.d1[r.clone()],
                &mut t.d2[r],
            );
        }
        t
    }

    #[inline]
    pub(crate) fn val(&self, k: usize, d: u32) -> f64 {
        self.vals[k * self.stride + d as usize]
    }

    #[inline]
    pub(crate) fn d1(&self, k: usize, d: u32) -> f64 {
        self.d1[k * self.stride + d as usize]
    }

    #[inline]
    pub(crate) fn d2(&self, k: usize, d: u32) -> f64 {
        self.d2[k * self.stride + d as usize]
    }

    /// `psi_j` using only coordinates `0..active`.
    #[inline]
    pub(crate) fn psi(&self, j: &MultiIndex, active: usize) -> f64 {
        let e = j.entries();
        let mut p = 1.0;
        for (k, &d) in e.iter().enumerate().take(active) {
            if d > 0 {
                p *= self.val(k, d);
            }
        }
        p
    }

    /// `d psi_j / d theta_m`.
    #[inline]
    pub(crate) fn dpsi(&self, j: &MultiIndex, active: usize, m: usize) -> f64 {
        let e = j.entries();
        if e[m] == 0 {
            return 0.0;
        }
        let mut p = self.d1(m, e[m]);
        for (k, &d) in e.iter().enumerate().take(active) {
            if k != m && d > 0 {
                p *= self.val(k, d);
            }
        }
        p
    }

    /// `d^2 psi_j / d theta_a d theta_b`.
    #[inline]
    pub(crate) fn d2psi(&self, j: &MultiIndex, active: usize, a: usize, b: usize) -> f64 {
        let e = j.entries();
        if e[a] == 0 || e[b] == 0 {
            return 0.0;
        }
        let mut p = if a == b {
            self.d2(a, e[a])
        } else {
            self.d1(a, e[a]) * self.d1(b, e[b])
        };
        for (k, &d) in e.iter().enumerate().take(active) {
            if k != a && k != b && d > 0 {
                p *= self.val(k, d);
            }
        }
        p
    }
}
