//! Metropolis-Hastings driver with adaptive transport maps.
//!
//! Row 0 of the sample matrix is the starting state; each of the remaining
//! `L - 1` rows is produced by one transition. After the transition that
//! writes row `k`, if `k` is a multiple of `K_U` and at least the adaptation
//! start, the map is refitted from rows `0..=k` and used from the next
//! transition on. The kernel between refits is therefore a fixed MH kernel.

use std::time::Instant;

use log::{debug, warn};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::optimizer::{MapOptimizer, OptimizerConfig};
use crate::par::{self, Execution};
use crate::polybasis::{union_sets, IndexSetKind, MultiIndexSet, PolynomialFamily};
use crate::proposals::{dr_log_terms, dr_stage2_log_ratio, mh_log_ratio, sanitize, MappedPoint, ReferenceProposal};
use crate::samples::SampleMatrix;
use crate::target::{std_normal_log_density, Target};
use crate::transport_map::TriangularMap;

/// Default adaptation interval `K_U`.
pub const DEFAULT_ADAPT_INTERVAL: usize = 500;
/// Cap on the number of recent distinct states entering the monitor.
pub const SIGMA2_WINDOW: usize = 2000;

/// Union of index-set families applied to every component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub family: PolynomialFamily,
    pub terms: Vec<(IndexSetKind, u32)>,
}

impl BasisSpec {
    pub fn total_order(degree: u32) -> Self {
        BasisSpec {
            family: PolynomialFamily::Hermite,
            terms: vec![(IndexSetKind::TotalOrder, degree)],
        }
    }

    pub fn with_family(mut self, family: PolynomialFamily) -> Self {
        self.family = family;
        self
    }

    pub fn union(mut self, kind: IndexSetKind, degree: u32) -> Self {
        self.terms.push((kind, degree));
        self
    }

    pub fn build(&self, dim: usize) -> Result<Vec<MultiIndexSet>> {
        if self.terms.is_empty() {
            return Err(Error::InvalidArgument("basis needs at least one index-set term".into()));
        }
        (0..dim)
            .map(|i| {
                let mut set = MultiIndexSet::empty(i, dim);
                for &(kind, deg) in &self.terms {
                    set = union_sets(&set, &kind.build(i, deg, dim))?;
                }
                Ok(set)
            })
            .collect()
    }

    pub fn identity_map(&self, dim: usize) -> Result<TriangularMap> {
        TriangularMap::identity(self.build(dim)?, self.family)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    /// Total number of recorded states `L`, including the start.
    pub steps: usize,
    /// `K_U`.
    pub adapt_interval: usize,
    /// First step at which a refit may happen; `None` means `max(K_U, 500)`.
    pub adapt_start: Option<usize>,
    pub burn_in: usize,
    pub seed: u64,
    pub proposal: ReferenceProposal,
    pub basis: BasisSpec,
    pub optimizer: OptimizerConfig,
    /// Refit the map during the run.
    pub adapt: bool,
    /// Robbins-Monro tuning of the local step scale during burn-in.
    pub tune: bool,
    pub target_acceptance: f64,
    /// Keep a copy of the map after each adaptation.
    pub keep_maps: bool,
    /// Parallelism for map refits.
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            steps: 10_000,
            adapt_interval: DEFAULT_ADAPT_INTERVAL,
            adapt_start: None,
            burn_in: 1000,
            seed: 0,
            proposal: ReferenceProposal::RandomWalk { sigma: 1.0 },
            basis: BasisSpec::total_order(3),
            optimizer: OptimizerConfig::default(),
            adapt: true,
            tune: true,
            target_acceptance: 0.3,
            keep_maps: true,
            execution: Execution::Sequential,
        }
    }
}

impl ChainConfig {
    pub fn effective_adapt_start(&self) -> usize {
        self.adapt_start.unwrap_or(self.adapt_interval.max(500))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.steps < 2 {
            return bad(format!("steps must be at least 2, got {}", self.steps));
        }
        if self.adapt_interval == 0 {
            return bad("adaptation interval must be positive".into());
        }
        if self.burn_in >= self.steps {
            return bad(format!("burn-in {} must be below steps {}", self.burn_in, self.steps));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return bad(format!("target acceptance {} outside (0, 1)", self.target_acceptance));
        }
        self.proposal.validate()?;
        self.optimizer.validate()
    }
}

/// What happened at one adaptation event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationRecord {
    /// Index of the last row used; the refit saw rows `0..=step`.
    pub step: usize,
    pub samples_used: usize,
    /// Monitor value of the outgoing map on the same window.
    pub sigma2_before: f64,
    /// Monitor value of the new map (equal to `sigma2_before` on failure).
    pub sigma2_after: f64,
    pub newton_iterations: Vec<usize>,
    pub error: Option<String>,
    pub map: Option<TriangularMap>,
}

/// Output of one chain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainResult {
    pub proposal: String,
    pub seed: u64,
    pub burn_in: usize,
    pub samples: SampleMatrix,
    pub log_target: Vec<f64>,
    /// Per transition: 0 rejected, otherwise the stage that accepted.
    pub accepted_stage: Vec<u8>,
    /// Per transition: number of target-density evaluations.
    pub evaluations: Vec<u32>,
    pub stage_attempts: [usize; 2],
    pub stage_accepts: [usize; 2],
    /// Per transition: whether the first-stage draw was a local move.
    pub local_draw: Vec<bool>,
    pub adaptations: Vec<AdaptationRecord>,
    pub final_map: Option<TriangularMap>,
    pub scale_factor: f64,
    pub elapsed_secs: f64,
}

impl ChainResult {
    /// Evaluations including the one at the starting state.
    pub fn total_evaluations(&self) -> usize {
        1 + self.evaluations.iter().map(|&e| e as usize).sum::<usize>()
    }

    pub fn acceptance_rate(&self) -> f64 {
        rate(self.accepted_stage.iter().map(|&s| s > 0))
    }

    /// Acceptance over transitions `from..` (transition `k` writes row `k+1`).
    pub fn acceptance_rate_from(&self, from: usize) -> f64 {
        rate(self.accepted_stage.iter().skip(from).map(|&s| s > 0))
    }

    /// Per-stage acceptance given the stage was attempted.
    pub fn stage_acceptance(&self) -> Vec<f64> {
        let n = if self.stage_attempts[1] > 0 { 2 } else { 1 };
        (0..n)
            .map(|s| {
                if self.stage_attempts[s] == 0 {
                    0.0
                } else {
                    self.stage_accepts[s] as f64 / self.stage_attempts[s] as f64
                }
            })
            .collect()
    }

    /// Samples after burn-in.
    pub fn post_burn_in(&self) -> SampleMatrix {
        self.samples.slice_rows(self.burn_in..self.samples.rows())
    }

    pub fn sigma2_series(&self) -> Vec<f64> {
        self.adaptations.iter().map(|a| a.sigma2_after).collect()
    }
}

fn rate(it: impl Iterator<Item = bool>) -> f64 {
    let (mut n, mut a) = (0usize, 0usize);
    for x in it {
        n += 1;
        a += x as usize;
    }
    if n == 0 {
        0.0
    } else {
        a as f64 / n as f64
    }
}

/// `log pi(theta) - log N(T(theta); 0, I) - log det DT(theta)`.
pub fn sigma2_quantity(map: &TriangularMap, theta: &[f64], log_target: f64) -> Result<f64> {
    let (r, ld) = map.forward_with_log_det(theta)?;
    Ok(log_target - std_normal_log_density(&r) - ld)
}

/// Unbiased variance of [`sigma2_quantity`] over the most recent `window`
/// distinct states among rows `0..=last`, using cached target values.
/// Points where the map cannot be evaluated are skipped.
pub fn estimate_sigma2_m(
    map: &TriangularMap,
    samples: &SampleMatrix,
    log_target: &[f64],
    last: usize,
    window: usize,
) -> Result<f64> {
    check_dim(map.dim(), samples.dim())?;
    let mut vals = Vec::with_capacity(window.min(last + 1));
    let mut prev: Option<&[f64]> = None;
    for k in (0..=last).rev() {
        if vals.len() >= window {
            break;
        }
        let row = samples.row(k);
        if prev.is_some_and(|p| p == row) {
            continue;
        }
        prev = Some(row);
        if log_target[k] == f64::NEG_INFINITY {
            continue;
        }
        if let Ok(v) = sigma2_quantity(map, row, log_target[k]) {
            if v.is_finite() {
                vals.push(v);
            }
        }
    }
    variance(&vals)
}

/// [`estimate_sigma2_m`] over all rows, evaluating the target afresh.
pub fn estimate_sigma2_m_for_target<T: Target + ?Sized>(target: &T, map: &TriangularMap, samples: &SampleMatrix) -> Result<f64> {
    let lt: Vec<f64> = samples.iter().map(|r| sanitize(target.log_density(r))).collect();
    if samples.is_empty() {
        return Err(Error::InsufficientSamples { needed: 2, found: 0 });
    }
    estimate_sigma2_m(map, samples, &lt, samples.rows() - 1, usize::MAX)
}

fn variance(v: &[f64]) -> Result<f64> {
    if v.len() < 2 {
        return Err(Error::InsufficientSamples { needed: 2, found: v.len() });
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    Ok(v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0))
}

/// Result of one transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepOutcome {
    /// 0 when rejected, otherwise the accepting stage.
    pub accepted_stage: u8,
    pub stages_attempted: u8,
    pub evaluations: u32,
    pub local: bool,
}

fn propose_point<T: Target + ?Sized>(
    target: &T,
    map: &TriangularMap,
    r: Vec<f64>,
    hint: &[f64],
    need_grad: bool,
    evals: &mut u32,
) -> MappedPoint {
    match MappedPoint::from_reference_near(target, map, &r, hint, need_grad) {
        Ok(p) => {
            *evals += 1;
            p
        }
        Err(e) => {
            debug!("proposal rejected without evaluation: {e}");
            MappedPoint::unreachable(r)
        }
    }
}

/// One MH (or two-stage delayed-rejection) transition from `current`.
pub fn mh_step<T: Target + ?Sized, R: Rng + ?Sized>(
    target: &T,
    map: &TriangularMap,
    prop: &ReferenceProposal,
    current: &MappedPoint,
    rng: &mut R,
    sigma2_m: f64,
) -> Result<(MappedPoint, StepOutcome)> {
    let (k1, k2) = prop.kernels(sigma2_m);
    let need_grad = prop.needs_gradient();
    let mut out = StepOutcome {
        stages_attempted: 1,
        ..StepOutcome::default()
    };
    let (r1, local) = k1.sample(&current.r, current.grad(), rng)?;
    out.local = local;
    let y1 = propose_point(target, map, r1, &current.theta, need_grad, &mut out.evaluations);
    let la1 = if y1.log_target == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        match (
            k1.log_density(&y1.r, &current.r, current.grad()),
            k1.log_density(&current.r, &y1.r, y1.grad()),
        ) {
            (Ok(f), Ok(b)) => mh_log_ratio(current.log_ref(), y1.log_ref(), f, b),
            _ => f64::NEG_INFINITY,
        }
    };
    let u: f64 = rng.random();
    if la1 >= 0.0 || u.ln() < la1 {
        out.accepted_stage = 1;
        return Ok((y1, out));
    }
    let Some(k2) = k2 else {
        return Ok((current.clone(), out));
    };
    out.stages_attempted = 2;
    let (r2, _) = k2.sample(&current.r, current.grad(), rng)?;
    let y2 = propose_point(target, map, r2, &current.theta, need_grad, &mut out.evaluations);
    let la2 = if y2.log_target == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        dr_log_terms(&k1, &k2, current, &y1, &y2).map_or(f64::NEG_INFINITY, |t| dr_stage2_log_ratio(&t))
    };
    let u: f64 = rng.random();
    if la2 >= 0.0 || u.ln() < la2 {
        out.accepted_stage = 2;
        return Ok((y2, out));
    }
    Ok((current.clone(), out))
}

/// Robbins-Monro controller on the log of a scale factor.
#[derive(Debug, Clone)]
struct ScaleTuner {
    log_factor: f64,
    updates: usize,
    target: f64,
}

impl ScaleTuner {
    fn new(target: f64) -> Self {
        ScaleTuner {
            log_factor: 0.0,
            updates: 0,
            target,
        }
    }

    fn update(&mut self, accepted: bool) {
        self.updates += 1;
        let gain = (self.updates as f64).powf(-0.6);
        let a = if accepted { 1.0 } else { 0.0 };
        self.log_factor = (self.log_factor + gain * (a - self.target)).clamp(-12.0, 6.0);
    }

    fn factor(&self) -> f64 {
        self.log_factor.exp()
    }
}

/// The acceptance indicator that drives tuning, if this step informs it.
fn tuning_signal(prop: &ReferenceProposal, out: &StepOutcome) -> Option<bool> {
    match prop {
        ReferenceProposal::DelayedRejectionGlobal { .. } => (out.stages_attempted == 2).then_some(out.accepted_stage == 2),
        ReferenceProposal::Mixture { .. } => out.local.then_some(out.accepted_stage == 1),
        _ => Some(out.accepted_stage > 0),
    }
}

/// Runs the adaptive chain from `theta0`, starting at the identity map.
pub fn run_adaptive<T: Target + ?Sized>(cfg: &ChainConfig, target: &T, theta0: &[f64]) -> Result<ChainResult> {
    let map = cfg.basis.identity_map(target.dim())?;
    run_chain(cfg, target, theta0, map)
}

/// Runs with `initial_map`; adaptation (if enabled) refits from there.
pub fn run_chain<T: Target + ?Sized>(
    cfg: &ChainConfig,
    target: &T,
    theta0: &[f64],
    initial_map: TriangularMap,
) -> Result<ChainResult> {
    cfg.validate()?;
    let n = target.dim();
    check_dim(n, theta0.len())?;
    check_dim(n, initial_map.dim())?;
    if cfg.proposal.needs_gradient() && !target.has_gradient() {
        return Err(Error::GradientUnavailable);
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let need_grad = cfg.proposal.needs_gradient();
    let lp0 = sanitize(target.log_density(theta0));
    if lp0 == f64::NEG_INFINITY {
        return Err(Error::ZeroDensity);
    }
    let mut map = initial_map;
    let mut current = MappedPoint::from_theta(target, &map, theta0, Some(lp0), need_grad)?;

    let l = cfg.steps;
    let mut samples = SampleMatrix::with_capacity(n, l);
    samples.push(theta0)?;
    let mut log_target = Vec::with_capacity(l);
    log_target.push(lp0);
    let mut accepted_stage = Vec::with_capacity(l - 1);
    let mut evaluations = Vec::with_capacity(l - 1);
    let mut local_draw = Vec::with_capacity(l - 1);
    let mut stage_attempts = [0usize; 2];
    let mut stage_accepts = [0usize; 2];
    let mut adaptations = Vec::new();

    let mut optimizer = if cfg.adapt {
        Some(MapOptimizer::new(cfg.basis.family, map.index_sets(), cfg.optimizer)?)
    } else {
        None
    };
    let mut appended = 0usize;
    let adapt_start = cfg.effective_adapt_start();
    let mut sigma2_m = f64::INFINITY;
    let mut tuner = ScaleTuner::new(cfg.target_acceptance);

    for k in 1..l {
        let prop = if cfg.tune { cfg.proposal.scaled(tuner.factor()) } else { cfg.proposal };
        let (next, out) = mh_step(target, &map, &prop, &current, &mut rng, sigma2_m)?;
        if cfg.tune && k <= cfg.burn_in {
            if let Some(a) = tuning_signal(&cfg.proposal, &out) {
                tuner.update(a);
            }
        }
        stage_attempts[0] += 1;
        if out.stages_attempted == 2 {
            stage_attempts[1] += 1;
        }
        if out.accepted_stage > 0 {
            stage_accepts[out.accepted_stage as usize - 1] += 1;
        }
        accepted_stage.push(out.accepted_stage);
        evaluations.push(out.evaluations);
        local_draw.push(out.local);
        current = next;
        samples.push(&current.theta)?;
        log_target.push(current.log_target);

        let Some(opt) = optimizer.as_mut() else { continue };
        if k % cfg.adapt_interval != 0 || k < adapt_start {
            continue;
        }
        opt.append(&samples, appended..k + 1, cfg.execution)?;
        appended = k + 1;
        let before = estimate_sigma2_m(&map, &samples, &log_target, k, SIGMA2_WINDOW).unwrap_or(f64::NAN);
        let mut record = AdaptationRecord {
            step: k,
            samples_used: appended,
            sigma2_before: before,
            sigma2_after: before,
            newton_iterations: Vec::new(),
            error: None,
            map: None,
        };
        let refit = opt.fit(Some(&map), cfg.execution).and_then(|fit| {
            let point = MappedPoint::from_theta(target, &fit.map, &current.theta, Some(current.log_target), need_grad)?;
            Ok((fit, point))
        });
        match refit {
            Ok((fit, point)) => {
                record.newton_iterations = fit.reports.iter().map(|r| r.iterations).collect();
                map = fit.map;
                current = point;
                record.sigma2_after = estimate_sigma2_m(&map, &samples, &log_target, k, SIGMA2_WINDOW).unwrap_or(f64::NAN);
            }
            Err(e) => {
                warn!("map refit at step {k} failed, keeping previous map: {e}");
                record.error = Some(e.to_string());
            }
        }
        if record.sigma2_after.is_finite() {
            sigma2_m = record.sigma2_after;
        }
        if cfg.keep_maps {
            record.map = Some(map.clone());
        }
        adaptations.push(record);
    }

    Ok(ChainResult {
        proposal: cfg.proposal.name().to_string(),
        seed: cfg.seed,
        burn_in: cfg.burn_in,
        samples,
        log_target,
        accepted_stage,
        evaluations,
        stage_attempts,
        stage_accepts,
        local_draw,
        adaptations,
        final_map: Some(map),
        scale_factor: tuner.factor(),
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

/// Adaptive-covariance random-walk baseline in target space.
///
/// Proposals are `N(theta, s^2 C)` with `C` the identity scaled by the
/// configured random-walk `sigma` until the adaptation start, then
/// `2.38^2/n` times the empirical covariance of all states so far (refreshed
/// every `K_U` steps). `s` is tuned during burn-in.
pub fn run_adaptive_rwm<T: Target + ?Sized>(cfg: &ChainConfig, target: &T, theta0: &[f64]) -> Result<ChainResult> {
    cfg.validate()?;
    let sigma0 = match cfg.proposal {
        ReferenceProposal::RandomWalk { sigma } => sigma,
        other => {
            return Err(Error::InvalidArgument(format!(
                "adaptive random walk needs a random-walk proposal, got {}",
                other.name()
            )))
        }
    };
    let n = target.dim();
    check_dim(n, theta0.len())?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut lp = sanitize(target.log_density(theta0));
    if lp == f64::NEG_INFINITY {
        return Err(Error::ZeroDensity);
    }
    let l = cfg.steps;
    let mut theta = theta0.to_vec();
    let mut samples = SampleMatrix::with_capacity(n, l);
    samples.push(theta0)?;
    let mut log_target = vec![lp];
    let mut accepted_stage = Vec::with_capacity(l - 1);
    let mut evaluations = Vec::with_capacity(l - 1);
    let mut chol: Vec<f64> = (0..n * n).map(|i| if i % (n + 1) == 0 { sigma0 } else { 0.0 }).collect();
    let mut tuner = ScaleTuner::new(cfg.target_acceptance);
    let mut adaptations = Vec::new();
    let adapt_start = cfg.effective_adapt_start();
    let mut accepts = 0usize;
    let mut z = vec![0.0; n];
    let mut prop = vec![0.0; n];

    for k in 1..l {
        let s = if cfg.tune { tuner.factor() } else { 1.0 };
        for v in z.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        for i in 0..n {
            let step: f64 = (0..=i).map(|j| chol[i * n + j] * z[j]).sum();
            prop[i] = theta[i] + s * step;
        }
        let lp_new = sanitize(target.log_density(&prop));
        let la = mh_log_ratio(lp, lp_new, 0.0, 0.0);
        let u: f64 = rng.random();
        let acc = la >= 0.0 || u.ln() < la;
        if acc {
            theta.copy_from_slice(&prop);
            lp = lp_new;
            accepts += 1;
        }
        if cfg.tune && k <= cfg.burn_in {
            tuner.update(acc);
        }
        accepted_stage.push(acc as u8);
        evaluations.push(1);
        samples.push(&theta)?;
        log_target.push(lp);

        if cfg.adapt && k % cfg.adapt_interval == 0 && k >= adapt_start {
            match empirical_cholesky(&samples, k) {
                Some(c) => {
                    let f = 2.38 / (n as f64).sqrt();
                    chol = c.into_iter().map(|v| v * f).collect();
                    adaptations.push(AdaptationRecord {
                        step: k,
                        samples_used: k + 1,
                        sigma2_before: f64::NAN,
                        sigma2_after: f64::NAN,
                        newton_iterations: Vec::new(),
                        error: None,
                        map: None,
                    });
                }
                None => warn!("covariance update at step {k} not positive definite"),
            }
        }
    }
    Ok(ChainResult {
        proposal: "adaptive-rwm".to_string(),
        seed: cfg.seed,
        burn_in: cfg.burn_in,
        samples,
        log_target,
        accepted_stage,
        evaluations,
        stage_attempts: [l - 1, 0],
        stage_accepts: [accepts, 0],
        local_draw: vec![true; l - 1],
        adaptations,
        final_map: None,
        scale_factor: tuner.factor(),
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

/// Lower Cholesky factor (row-major) of the covariance of rows `0..=last`,
/// with a small jitter.
fn empirical_cholesky(samples: &SampleMatrix, last: usize) -> Option<Vec<f64>> {
    let n = samples.dim();
    let m = (last + 1) as f64;
    let mut mean = vec![0.0; n];
    for r in samples.iter_range(0..last + 1) {
        for (a, b) in mean.iter_mut().zip(r) {
            *a += b / m;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(n, n);
    for r in samples.iter_range(0..last + 1) {
        for i in 0..n {
            for j in 0..=i {
                cov[(i, j)] += (r[i] - mean[i]) * (r[j] - mean[j]);
            }
        }
    }
    for i in 0..n {
        for j in 0..=i {
            let v = cov[(i, j)] / (m - 1.0);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let scale = (0..n).map(|i| cov[(i, i)]).fold(0.0, f64::max);
    if !(scale > 0.0) {
        return None;
    }
    for i in 0..n {
        cov[(i, i)] += 1e-10 * scale;
    }
    let l = cov.cholesky()?.l();
    Some((0..n * n).map(|k| l[(k / n, k % n)]).collect())
}

/// Which sampler a replicate runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampler {
    TransportMap,
    AdaptiveRwm,
}

/// Runs `count` independent chains with seeds `cfg.seed + i`.
pub fn run_replicates<T: Target + ?Sized>(
    cfg: &ChainConfig,
    sampler: Sampler,
    target: &T,
    theta0: &[f64],
    count: usize,
    exec: Execution,
) -> Vec<Result<ChainResult>> {
    par::map_indices(exec, count, |i| {
        let mut c = cfg.clone();
        c.seed = cfg.seed.wrapping_add(i as u64);
        match sampler {
            Sampler::TransportMap => run_adaptive(&c, target, theta0),
            Sampler::AdaptiveRwm => run_adaptive_rwm(&c, target, theta0),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::fit_map;
    use crate::target::CountingTarget;

    struct Gauss2 {
        // precision of N(0, [[1, .5], [.5, 1]])
        p: [[f64; 2]; 2],
    }

    impl Gauss2 {
        fn new() -> Self {
            let det = 0.75;
            Gauss2 {
                p: [[1.0 / det, -0.5 / det], [-0.5 / det, 1.0 / det]],
            }
        }
    }

    impl Target for Gauss2 {
        fn dim(&self) -> usize {
            2
        }
        fn log_density(&self, t: &[f64]) -> f64 {
            -0.5 * (self.p[0][0] * t[0] * t[0] + 2.0 * self.p[0][1] * t[0] * t[1] + self.p[1][1] * t[1] * t[1])
        }
        fn grad_log_density(&self, t: &[f64]) -> Option<Vec<f64>> {
            Some(vec![
                -(self.p[0][0] * t[0] + self.p[0][1] * t[1]),
                -(self.p[1][0] * t[0] + self.p[1][1] * t[1]),
            ])
        }
        fn has_gradient(&self) -> bool {
            true
        }
    }

    struct Banana;
    impl Target for Banana {
        fn dim(&self) -> usize {
            2
        }
        fn log_density(&self, t: &[f64]) -> f64 {
            let s = t[1] + t[0] * t[0] - 1.0;
            -0.5 * t[0] * t[0] - 0.5 * s * s
        }
    }

    struct StdNormal1;
    impl Target for StdNormal1 {
        fn dim(&self) -> usize {
            1
        }
        fn log_density(&self, t: &[f64]) -> f64 {
            -0.5 * t[0] * t[0]
        }
    }

    fn cfg(steps: usize, prop: ReferenceProposal) -> ChainConfig {
        ChainConfig {
            steps,
            burn_in: steps / 10,
            seed: 11,
            proposal: prop,
            adapt_interval: 500,
            ..ChainConfig::default()
        }
    }

    #[test]
    fn chain_is_deterministic() {
        for prop in [
            ReferenceProposal::RandomWalk { sigma: 0.8 },
            ReferenceProposal::DelayedRejectionGlobal { sigma2: 0.5 },
            ReferenceProposal::Mixture { w_max: 0.9, w_scale: 1.0, sigma: 0.5 },
        ] {
            let c = cfg(3000, prop);
            let a = run_adaptive(&c, &Banana, &[0.0, 0.0]).unwrap();
            let b = run_adaptive(&c, &Banana, &[0.0, 0.0]).unwrap();
            assert_eq!(a.samples, b.samples);
            assert_eq!(a.accepted_stage, b.accepted_stage);
            let par = ChainConfig {
                execution: Execution::Parallel,
                ..c
            };
            let p = run_adaptive(&par, &Banana, &[0.0, 0.0]).unwrap();
            assert_eq!(a.samples, p.samples);
        }
    }

    #[test]
    fn rejected_steps_repeat_state_and_counts_match() {
        let t = CountingTarget::new(Banana);
        let c = cfg(4000, ReferenceProposal::DelayedRejectionLocal { sigma1: 1.5, sigma2: 0.4 });
        let res = run_adaptive(&c, &t, &[0.0, 0.0]).unwrap();
        assert_eq!(res.samples.rows(), 4000);
        assert_eq!(res.total_evaluations(), t.evaluations());
        for (k, &s) in res.accepted_stage.iter().enumerate() {
            if s == 0 {
                assert_eq!(res.samples.row(k), res.samples.row(k + 1));
            }
        }
        assert!(res.stage_attempts[1] > 0);
        assert!(res.evaluations.iter().all(|&e| (1..=2).contains(&e)));
    }

    #[test]
    fn adaptations_only_at_multiples_without_lookahead() {
        let c = ChainConfig {
            adapt_start: Some(1000),
            ..cfg(5200, ReferenceProposal::RandomWalk { sigma: 1.0 })
        };
        let res = run_adaptive(&c, &Banana, &[0.0, 0.0]).unwrap();
        let steps: Vec<usize> = res.adaptations.iter().map(|a| a.step).collect();
        assert_eq!(steps, vec![1000, 1500, 2000, 2500, 3000, 3500, 4000, 4500, 5000]);
        for a in &res.adaptations {
            assert_eq!(a.samples_used, a.step + 1);
            assert!(a.error.is_none());
        }
        // refitting on the prefix reproduces the recorded map
        let a = &res.adaptations[2];
        let sets = c.basis.build(2).unwrap();
        let prefix = res.samples.slice_rows(0..a.samples_used);
        let fit = fit_map(&prefix, sets, c.basis.family, &c.optimizer, res.adaptations[1].map.as_ref(), Execution::Sequential).unwrap();
        let recorded = a.map.as_ref().unwrap();
        for (x, y) in fit.map.components().iter().zip(recorded.components()) {
            for (p, q) in x.coefficients().iter().zip(y.coefficients()) {
                assert!((p - q).abs() < 1e-8 * p.abs().max(1.0));
            }
        }
    }

    #[test]
    fn no_adaptation_matches_fixed_identity() {
        let c = ChainConfig {
            adapt_interval: 10_000,
            ..cfg(3000, ReferenceProposal::RandomWalk { sigma: 1.0 })
        };
        let a = run_adaptive(&c, &Banana, &[0.0, 0.0]).unwrap();
        assert!(a.adaptations.is_empty());
        let fixed = ChainConfig { adapt: false, ..c.clone() };
        let b = run_chain(&fixed, &Banana, &[0.0, 0.0], c.basis.identity_map(2).unwrap()).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    /// Plain random-walk Metropolis written directly as the oracle.
    fn rwm_oracle(sigma: f64, steps: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = 0.0f64;
        let mut acc = 0usize;
        for _ in 0..steps {
            let z: f64 = StandardNormal.sample(&mut rng);
            let y = x + sigma * z;
            let u: f64 = rng.random();
            if u.ln() < 0.5 * (x * x - y * y) {
                x = y;
                acc += 1;
            }
        }
        acc as f64 / steps as f64
    }

    #[test]
    fn identity_map_matches_plain_rwm_rate() {
        let steps = 200_000;
        let c = ChainConfig {
            adapt: false,
            tune: false,
            burn_in: 0,
            ..cfg(steps + 1, ReferenceProposal::RandomWalk { sigma: 2.4 })
        };
        let res = run_adaptive(&c, &StdNormal1, &[0.0]).unwrap();
        let oracle = rwm_oracle(2.4, steps, 99);
        let se = (oracle * (1.0 - oracle) / steps as f64).sqrt() * 3.0;
        assert!((res.acceptance_rate() - oracle).abs() < 5.0 * se, "{} vs {}", res.acceptance_rate(), oracle);
    }

    #[test]
    fn zero_density_proposals_are_rejected() {
        struct HalfLine;
        impl Target for HalfLine {
            fn dim(&self) -> usize {
                1
            }
            fn log_density(&self, t: &[f64]) -> f64 {
                if t[0] < 0.0 {
                    f64::NAN
                } else {
                    -t[0]
                }
            }
        }
        let c = cfg(5000, ReferenceProposal::RandomWalk { sigma: 1.0 });
        let res = run_adaptive(&c, &HalfLine, &[1.0]).unwrap();
        assert!(res.samples.iter().all(|r| r[0] >= 0.0));
        assert!(run_adaptive(&c, &HalfLine, &[-1.0]).is_err());
    }

    #[test]
    fn gaussian_map_learns_whitening() {
        let c = ChainConfig {
            basis: BasisSpec::total_order(1),
            ..cfg(20_000, ReferenceProposal::DelayedRejectionGlobal { sigma2: 0.5 })
        };
        let res = run_adaptive(&c, &Gauss2::new(), &[0.0, 0.0]).unwrap();
        let m = res.final_map.clone().unwrap();
        // inverse lower Cholesky factor of [[1, .5], [.5, 1]]
        let l_inv = [[1.0, 0.0], [-0.5 / 0.75f64.sqrt(), 1.0 / 0.75f64.sqrt()]];
        let j = m.jacobian(&[0.0, 0.0]).unwrap();
        for i in 0..2 {
            for k in 0..=i {
                let e = l_inv[i][k];
                assert!((j[i * 2 + k] - e).abs() < 0.05 * e.abs().max(0.3), "{i}{k}: {} vs {e}", j[i * 2 + k]);
            }
        }
        let late = res.adaptations.last().unwrap().step;
        let stage1: Vec<bool> = res.accepted_stage[late..].iter().map(|&s| s == 1).collect();
        assert!(rate(stage1.into_iter()) > 0.9);
        assert!(res.sigma2_series().last().unwrap() < &1e-3);
    }

    #[test]
    fn mala_chain_runs_and_needs_gradient() {
        let c = cfg(4000, ReferenceProposal::Mala { dt: 1.0 });
        let res = run_adaptive(&c, &Gauss2::new(), &[0.0, 0.0]).unwrap();
        assert!(res.acceptance_rate() > 0.2);
        assert_eq!(run_adaptive(&c, &Banana, &[0.0, 0.0]).unwrap_err(), Error::GradientUnavailable);
    }

    #[test]
    fn sigma2_examples() {
        let id = BasisSpec::total_order(1).identity_map(2).unwrap();
        // exact map for the matching Gaussian is the identity for N(0, I)
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
        let s: Vec<[f64; 2]> = (0..500).map(|_| [draw(), draw()]).collect();
        let m = SampleMatrix::from_rows(2, &s).unwrap();
        struct Std2;
        impl Target for Std2 {
            fn dim(&self) -> usize {
                2
            }
            fn log_density(&self, t: &[f64]) -> f64 {
                std_normal_log_density(t)
            }
        }
        assert!(estimate_sigma2_m_for_target(&Std2, &id, &m).unwrap() < 1e-20);

        // identity map on N(0, diag(1, 4)): variance (9/64) Var(theta_2^2) = 4.5
        struct Wide;
        impl Target for Wide {
            fn dim(&self) -> usize {
                2
            }
            fn log_density(&self, t: &[f64]) -> f64 {
                -0.5 * t[0] * t[0] - t[1] * t[1] / 8.0
            }
        }
        let big: Vec<[f64; 2]> = (0..1_000_000).map(|_| [draw(), 2.0 * draw()]).collect();
        let m = SampleMatrix::from_rows(2, &big).unwrap();
        let v = estimate_sigma2_m_for_target(&Wide, &id, &m).unwrap();
        assert!((v - 4.5).abs() < 0.1, "{v}");

        let one = SampleMatrix::from_rows(2, &[[0.0, 0.0]]).unwrap();
        assert!(estimate_sigma2_m_for_target(&Wide, &id, &one).is_err());
    }

    #[test]
    fn sigma2_window_skips_repeats() {
        let id = BasisSpec::total_order(1).identity_map(1).unwrap();
        let rows = [[1.0], [1.0], [2.0], [2.0], [3.0]];
        let m = SampleMatrix::from_rows(1, &rows).unwrap();
        let lt = vec![0.0; 5];
        // distinct states 3, 2, 1 -> quantity = 0.5 t^2 + const
        let v = estimate_sigma2_m(&id, &m, &lt, 4, 2).unwrap();
        assert!((v - variance(&[4.5, 2.0]).unwrap()).abs() < 1e-12);
        let v = estimate_sigma2_m(&id, &m, &lt, 4, 10).unwrap();
        assert!((v - variance(&[4.5, 2.0, 0.5]).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn baseline_rwm_adapts_and_tunes() {
        let c = ChainConfig {
            burn_in: 5000,
            ..cfg(20_000, ReferenceProposal::RandomWalk { sigma: 0.1 })
        };
        let res = run_adaptive_rwm(&c, &Gauss2::new(), &[0.0, 0.0]).unwrap();
        assert!(!res.adaptations.is_empty());
        let a = res.acceptance_rate_from(c.burn_in);
        assert!(a > 0.15 && a < 0.5, "{a}");
        assert!(run_adaptive_rwm(&cfg(100, ReferenceProposal::Mala { dt: 1.0 }), &Banana, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn replicates_use_offset_seeds() {
        let c = cfg(1500, ReferenceProposal::RandomWalk { sigma: 1.0 });
        let reps = run_replicates(&c, Sampler::TransportMap, &Banana, &[0.0, 0.0], 3, Execution::Parallel);
        let seq = run_replicates(&c, Sampler::TransportMap, &Banana, &[0.0, 0.0], 3, Execution::Sequential);
        for (i, (a, b)) in reps.iter().zip(&seq).enumerate() {
            let (a, b) = (a.as_ref().unwrap(), b.as_ref().unwrap());
            assert_eq!(a.seed, 11 + i as u64);
            assert_eq!(a.samples, b.samples);
        }
        assert_ne!(reps[0].as_ref().unwrap().samples, reps[1].as_ref().unwrap().samples);
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(100, ReferenceProposal::RandomWalk { sigma: 1.0 });
        c.burn_in = 100;
        assert!(c.validate().is_err());
        c.burn_in = 10;
        c.adapt_interval = 0;
        assert!(c.validate().is_err());
        assert_eq!(ChainConfig::default().effective_adapt_start(), 500);
        let c = ChainConfig {
            adapt_interval: 1000,
            ..ChainConfig::default()
        };
        assert_eq!(c.effective_adapt_start(), 1000);
    }
}
