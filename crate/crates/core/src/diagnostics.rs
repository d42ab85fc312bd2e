//! Autocorrelation times, effective sample sizes and efficiency tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcmc::ChainResult;

/// Shortest series accepted by the estimators.
pub const MIN_SERIES_LEN: usize = 100;
/// Window constant `c` of the self-consistent cut-off.
pub const WINDOW_C: f64 = 6.0;

/// Integrated autocorrelation time, reported as `1 + 2 sum_t rho(t)` so an
/// uncorrelated series gives about 1.
///
/// Autocovariances use the biased `1/N` normalization. The sum is cut at the
/// smallest `W` with `W >= c * tau_half(W)`, where `tau_half(W) = 1/2 +
/// sum_{t<=W} rho(t)`.
pub fn integrated_autocorrelation(series: &[f64]) -> Result<f64> {
    let n = series.len();
    if n < MIN_SERIES_LEN {
        return Err(Error::InsufficientSamples {
            needed: MIN_SERIES_LEN,
            found: n,
        });
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let centred: Vec<f64> = series.iter().map(|x| x - mean).collect();
    let c0 = centred.iter().map(|x| x * x).sum::<f64>() / n as f64;
    if !(c0 > 0.0) || !c0.is_finite() {
        return Err(Error::ConstantSeries);
    }
    let mut tau_half = 0.5;
    let max_lag = n / 2;
    for t in 1..=max_lag {
        let ct = centred[..n - t].iter().zip(&centred[t..]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        tau_half += ct / c0;
        if t as f64 >= WINDOW_C * tau_half {
            break;
        }
    }
    Ok((2.0 * tau_half).max(1.0 / n as f64))
}

/// `N / tau` for a post-burn-in series of length `N`.
pub fn effective_sample_size(series: &[f64]) -> Result<f64> {
    let tau = integrated_autocorrelation(series)?;
    Ok(series.len() as f64 / tau)
}

/// Efficiency summary of one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EssReport {
    pub proposal: String,
    pub seed: u64,
    /// Per-dimension integrated autocorrelation time.
    pub tau: Vec<f64>,
    pub tau_max: f64,
    pub min_ess: f64,
    pub ess_per_eval: f64,
    pub ess_per_sec: f64,
    /// Acceptance rate of each proposal stage, given the stage was tried.
    pub acceptance: Vec<f64>,
    pub post_burn_in: usize,
    pub evaluations: usize,
    pub elapsed_secs: f64,
}

impl EssReport {
    /// ESS from post-burn-in samples; costs over the whole run.
    pub fn from_chain(res: &ChainResult) -> Result<Self> {
        let post = res.post_burn_in();
        let tau = (0..post.dim())
            .map(|d| integrated_autocorrelation(&post.column(d)))
            .collect::<Result<Vec<_>>>()?;
        let tau_max = tau.iter().copied().fold(0.0, f64::max);
        let n = post.rows();
        let min_ess = n as f64 / tau_max;
        let evaluations = res.total_evaluations();
        Ok(EssReport {
            proposal: res.proposal.clone(),
            seed: res.seed,
            tau,
            tau_max,
            min_ess,
            ess_per_eval: min_ess / evaluations as f64,
            ess_per_sec: if res.elapsed_secs > 0.0 { min_ess / res.elapsed_secs } else { f64::INFINITY },
            acceptance: res.stage_acceptance(),
            post_burn_in: n,
            evaluations,
            elapsed_secs: res.elapsed_secs,
        })
    }
}

/// One row of the efficiency table, averaged over replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub method: String,
    pub replicates: usize,
    pub tau_max: f64,
    /// Sample standard deviation of `tau_max` across replicates (0 for one).
    pub sigma_tau: f64,
    pub ess: f64,
    pub ess_per_sec: f64,
    pub ess_per_eval: f64,
    pub rel_ess_per_sec: f64,
    pub rel_ess_per_eval: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyTable {
    pub baseline: String,
    pub rows: Vec<EfficiencyRow>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Builds the table. `baseline` names the reference method; `None` uses the
/// first one.
pub fn efficiency_table(methods: &[(String, Vec<EssReport>)], baseline: Option<&str>) -> Result<EfficiencyTable> {
    if methods.is_empty() || methods.iter().any(|(_, r)| r.is_empty()) {
        return Err(Error::InvalidArgument("every method needs at least one report".into()));
    }
    let base_idx = match baseline {
        None => 0,
        Some(name) => methods
            .iter()
            .position(|(m, _)| m == name)
            .ok_or_else(|| Error::InvalidArgument(format!("baseline '{name}' not among the methods")))?,
    };
    let mut rows: Vec<EfficiencyRow> = methods
        .iter()
        .map(|(name, reps)| {
            let col = |f: fn(&EssReport) -> f64| -> Vec<f64> { reps.iter().map(f).collect() };
            let taus = col(|r| r.tau_max);
            EfficiencyRow {
                method: name.clone(),
                replicates: reps.len(),
                tau_max: mean(&taus),
                sigma_tau: std_dev(&taus),
                ess: mean(&col(|r| r.min_ess)),
                ess_per_sec: mean(&col(|r| r.ess_per_sec)),
                ess_per_eval: mean(&col(|r| r.ess_per_eval)),
                rel_ess_per_sec: 1.0,
                rel_ess_per_eval: 1.0,
            }
        })
        .collect();
    let (bs, be) = (rows[base_idx].ess_per_sec, rows[base_idx].ess_per_eval);
    for r in &mut rows {
        r.rel_ess_per_sec = r.ess_per_sec / bs;
        r.rel_ess_per_eval = r.ess_per_eval / be;
    }
    Ok(EfficiencyTable {
        baseline: methods[base_idx].0.clone(),
        rows,
    })
}

impl EfficiencyTable {
    /// Aligned plain-text rendering.
    pub fn to_text(&self) -> String {
        let header = ["Method", "Reps", "tau_max", "sigma_tau", "ESS", "ESS/sec", "ESS/eval", "Rel ESS/sec", "Rel ESS/eval"];
        let body: Vec<[String; 9]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.method.clone(),
                    r.replicates.to_string(),
                    format!("{:.2}", r.tau_max),
                    format!("{:.2}", r.sigma_tau),
                    format!("{:.1}", r.ess),
                    format!("{:.2}", r.ess_per_sec),
                    format!("{:.2e}", r.ess_per_eval),
                    format!("{:.2}", r.rel_ess_per_sec),
                    format!("{:.2}", r.rel_ess_per_eval),
                ]
            })
            .collect();
        let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
        for row in &body {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let line = |cells: Vec<&str>, out: &mut String| {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(header.to_vec(), &mut out);
        for row in &body {
            line(row.iter().map(String::as_str).collect(), &mut out);
        }
        let _ = writeln!(out, "baseline: {}", self.baseline);
        out
    }
}
