//! Run configuration read from a TOML file.
//!
//! Every section rejects unknown keys.

use std::path::PathBuf;

use serde::Deserialize;
use tmcmc::mcmc::{BasisSpec, ChainConfig, Sampler, DEFAULT_ADAPT_INTERVAL};
use tmcmc::optimizer::{OptimizerConfig, RadiusPolicy};
use tmcmc::polybasis::{IndexSetKind, PolynomialFamily};
use tmcmc::proposals::ReferenceProposal;
use tmcmc::transport_map::DEFAULT_LAMBDA_MIN;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSection,
    pub proposal: ProposalSection,
    #[serde(default)]
    pub basis: BasisSection,
    #[serde(default)]
    pub chain: ChainSection,
    #[serde(default)]
    pub map: MapSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub name: String,
    /// Starting point; defaults to the problem's own.
    pub start: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProposalSection {
    RandomWalk { sigma: f64 },
    Mala { dt: f64 },
    DrGlobal { sigma2: f64 },
    DrLocal { sigma1: f64, sigma2: f64 },
    Mixture { w_max: f64, w_scale: f64, sigma: f64 },
    /// Target-space adaptive-covariance random walk, no map.
    AdaptiveRwm { sigma: f64 },
}

impl ProposalSection {
    pub fn resolve(self) -> (Sampler, ReferenceProposal) {
        use ReferenceProposal as R;
        match self {
            ProposalSection::RandomWalk { sigma } => (Sampler::TransportMap, R::RandomWalk { sigma }),
            ProposalSection::Mala { dt } => (Sampler::TransportMap, R::Mala { dt }),
            ProposalSection::DrGlobal { sigma2 } => (Sampler::TransportMap, R::DelayedRejectionGlobal { sigma2 }),
            ProposalSection::DrLocal { sigma1, sigma2 } => (Sampler::TransportMap, R::DelayedRejectionLocal { sigma1, sigma2 }),
            ProposalSection::Mixture { w_max, w_scale, sigma } => (Sampler::TransportMap, R::Mixture { w_max, w_scale, sigma }),
            ProposalSection::AdaptiveRwm { sigma } => (Sampler::AdaptiveRwm, R::RandomWalk { sigma }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSection {
    #[serde(default)]
    pub family: PolynomialFamily,
    pub total_order: Option<u32>,
    pub no_mixed: Option<u32>,
    pub diagonal: Option<u32>,
}

impl Default for BasisSection {
    fn default() -> Self {
        BasisSection {
            family: PolynomialFamily::Hermite,
            total_order: Some(3),
            no_mixed: None,
            diagonal: None,
        }
    }
}

impl BasisSection {
    pub fn to_spec(&self) -> Result<BasisSpec, String> {
        let terms: Vec<(IndexSetKind, u32)> = [
            (IndexSetKind::TotalOrder, self.total_order),
            (IndexSetKind::NoMixed, self.no_mixed),
            (IndexSetKind::Diagonal, self.diagonal),
        ]
        .into_iter()
        .filter_map(|(k, d)| d.map(|d| (k, d)))
        .collect();
        if terms.is_empty() {
            return Err("[basis] needs at least one of total_order, no_mixed, diagonal".into());
        }
        Ok(BasisSpec {
            family: self.family,
            terms,
        })
    }
}

/// Parses `total-order:3,diagonal:5` style basis strings.
pub fn parse_basis(spec: &str, family: PolynomialFamily) -> Result<BasisSpec, String> {
    let mut terms = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, deg) = part
            .split_once(':')
            .ok_or_else(|| format!("basis term '{part}' must look like kind:degree"))?;
        let kind = IndexSetKind::from_name(name.trim()).ok_or_else(|| format!("unknown index set '{name}'"))?;
        let deg: u32 = deg.trim().parse().map_err(|e| format!("bad degree in '{part}': {e}"))?;
        terms.push((kind, deg));
    }
    if terms.is_empty() {
        return Err("empty basis specification".into());
    }
    Ok(BasisSpec { family, terms })
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainSection {
    pub steps: usize,
    pub burn_in: usize,
    pub adapt_interval: usize,
    pub adapt_start: Option<usize>,
    pub seed: u64,
    pub replicates: usize,
    pub adapt: bool,
    pub tune: bool,
    pub target_acceptance: f64,
}

impl Default for ChainSection {
    fn default() -> Self {
        let c = ChainConfig::default();
        ChainSection {
            steps: c.steps,
            burn_in: c.burn_in,
            adapt_interval: DEFAULT_ADAPT_INTERVAL,
            adapt_start: None,
            seed: 0,
            replicates: 1,
            adapt: true,
            tune: true,
            target_acceptance: c.target_acceptance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum RadiusSetting {
    Named(RadiusName),
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RadiusName {
    Unbounded,
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapSection {
    pub k_r: f64,
    pub lambda_min: f64,
    pub radius: RadiusSetting,
    pub newton_tol: f64,
    pub max_newton_iters: usize,
}

impl Default for MapSection {
    fn default() -> Self {
        let o = OptimizerConfig::default();
        MapSection {
            k_r: o.k_r,
            lambda_min: DEFAULT_LAMBDA_MIN,
            radius: RadiusSetting::Named(RadiusName::Unbounded),
            newton_tol: o.newton_tol,
            max_newton_iters: o.max_newton_iters,
        }
    }
}

impl MapSection {
    pub fn to_optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            k_r: self.k_r,
            lambda_min: self.lambda_min,
            newton_tol: self.newton_tol,
            max_newton_iters: self.max_newton_iters,
            radius: match self.radius {
                RadiusSetting::Named(RadiusName::Unbounded) => RadiusPolicy::Unbounded,
                RadiusSetting::Named(RadiusName::Auto) => RadiusPolicy::Auto,
                RadiusSetting::Fixed(r) => RadiusPolicy::Fixed(r),
            },
            ..OptimizerConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Write the map after every adaptation, not just the final one.
    pub map_snapshots: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("tmcmc-out"),
            map_snapshots: true,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.chain_config()?;
        if cfg.chain.replicates == 0 {
            return Err("chain.replicates must be at least 1".into());
        }
        Ok(cfg)
    }

    /// The sampler and the per-chain configuration (seed of replicate 0).
    pub fn chain_config(&self) -> Result<ChainConfig, String> {
        let (_, proposal) = self.proposal.resolve();
        let c = ChainConfig {
            steps: self.chain.steps,
            adapt_interval: self.chain.adapt_interval,
            adapt_start: self.chain.adapt_start,
            burn_in: self.chain.burn_in,
            seed: self.chain.seed,
            proposal,
            basis: self.basis.to_spec()?,
            optimizer: self.map.to_optimizer(),
            adapt: self.chain.adapt,
            tune: self.chain.tune,
            target_acceptance: self.chain.target_acceptance,
            keep_maps: self.output.map_snapshots,
            ..ChainConfig::default()
        };
        c.validate().map_err(|e| e.to_string())?;
        Ok(c)
    }

    pub fn sampler(&self) -> Sampler {
        self.proposal.resolve().0
    }

    /// Method label used in diagnostics and comparison tables.
    pub fn method_name(&self) -> String {
        match self.sampler() {
            Sampler::AdaptiveRwm => "adaptive-rwm".into(),
            Sampler::TransportMap => format!("tm+{}", self.proposal.resolve().1.name()),
        }
    }
}
