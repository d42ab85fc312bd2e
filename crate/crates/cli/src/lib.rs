//! Command implementations behind the `tmcmc` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use tmcmc::diagnostics::{efficiency_table, EfficiencyTable, EssReport};
use tmcmc::mcmc::{run_replicates, AdaptationRecord, ChainResult, Sampler};
use tmcmc::optimizer::{fit_map, OptimizerConfig};
use tmcmc::polybasis::PolynomialFamily;
use tmcmc::problems::problem_by_name;
use tmcmc::samples::{read_samples, write_samples};
use tmcmc::Execution;

pub mod config;

use config::{parse_basis, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "tmcmc", version, about = "Adaptive transport-map MCMC")]
pub struct Cli {
    /// Maximum number of worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the chains described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output.dir`.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Overrides `chain.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit a map to a sample file.
    Fitmap {
        samples: PathBuf,
        /// Comma-separated `kind:degree` terms, e.g. `total-order:3,diagonal:5`.
        #[arg(long, default_value = "total-order:1")]
        basis: String,
        #[arg(long, default_value = "hermite")]
        family: String,
        #[arg(long)]
        k_r: Option<f64>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Tabulate efficiency across result directories.
    Compare {
        #[arg(num_args = 2.., required = true)]
        dirs: Vec<PathBuf>,
        /// Method used as the reference; defaults to the first directory.
        #[arg(long)]
        baseline: Option<String>,
        /// Directory for `comparison.txt` and `comparison.json`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub enum CliError {
    /// Bad input: configuration, arguments or files.
    Input(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

type CliResult<T> = std::result::Result<T, CliError>;

fn input(msg: impl Into<String>) -> CliError {
    CliError::Input(msg.into())
}

fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| runtime(format!("writing {}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("plain data serializes");
    s.push('\n');
    s
}

pub fn execute(cli: Cli) -> CliResult<()> {
    let jobs = cli.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if jobs == 0 {
        return Err(input("--jobs must be at least 1"));
    }
    match cli.command {
        Command::Run { config, output, seed } => {
            let text = fs::read_to_string(&config).map_err(|e| input(format!("reading {}: {e}", config.display())))?;
            let mut cfg = RunConfig::parse(&text).map_err(|e| input(format!("{}: {e}", config.display())))?;
            if let Some(o) = output {
                cfg.output.dir = o;
            }
            if let Some(s) = seed {
                cfg.chain.seed = s;
            }
            let summary = cmd_run(&cfg, jobs)?;
            print!("{summary}");
            Ok(())
        }
        Command::Fitmap {
            samples,
            basis,
            family,
            k_r,
            output,
        } => {
            let family = PolynomialFamily::from_name(&family).ok_or_else(|| input(format!("unknown family '{family}'")))?;
            let mut opt = OptimizerConfig::default();
            if let Some(k) = k_r {
                opt.k_r = k;
            }
            let report = cmd_fitmap(&samples, &basis, family, &opt, &output, jobs)?;
            print!("{report}");
            Ok(())
        }
        Command::Compare { dirs, baseline, output } => {
            let table = cmd_compare(&dirs, baseline.as_deref())?;
            print!("{}", table.to_text());
            match output {
                Some(dir) => {
                    fs::create_dir_all(&dir).map_err(|e| runtime(format!("creating {}: {e}", dir.display())))?;
                    write_file(&dir.join("comparison.txt"), &table.to_text())?;
                    write_file(&dir.join("comparison.json"), &to_json(&table))?;
                }
                None => print!("\n{}", to_json(&table)),
            }
            Ok(())
        }
    }
}

/// Adaptation record without the map, as written to `adaptations.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationSummary {
    pub replicate: usize,
    pub step: usize,
    pub samples_used: usize,
    pub sigma2_before: Option<f64>,
    pub sigma2_after: Option<f64>,
    pub newton_iterations: Vec<usize>,
    pub error: Option<String>,
}

impl AdaptationSummary {
    fn new(replicate: usize, a: &AdaptationRecord) -> Self {
        let finite = |v: f64| v.is_finite().then_some(v);
        AdaptationSummary {
            replicate,
            step: a.step,
            samples_used: a.samples_used,
            sigma2_before: finite(a.sigma2_before),
            sigma2_after: finite(a.sigma2_after),
            newton_iterations: a.newton_iterations.clone(),
            error: a.error.clone(),
        }
    }
}

fn run_all(cfg: &RunConfig, jobs: usize) -> CliResult<Vec<ChainResult>> {
    let problem = problem_by_name(&cfg.problem.name).map_err(|e| input(e.to_string()))?;
    let theta0 = cfg.problem.start.clone().unwrap_or_else(|| problem.theta0.clone());
    if theta0.len() != problem.target.dim() {
        return Err(input(format!(
            "problem.start has {} entries but '{}' has dimension {}",
            theta0.len(),
            problem.name,
            problem.target.dim()
        )));
    }
    let mut chain = cfg.chain_config().map_err(input)?;
    let reps = cfg.chain.replicates;
    let exec = if jobs > 1 && Execution::available() {
        Execution::Parallel
    } else {
        Execution::Sequential
    };
    if reps == 1 {
        chain.execution = exec;
    }
    let go = || run_replicates(&chain, cfg.sampler(), problem.target.as_ref(), &theta0, reps, exec);
    #[cfg(feature = "parallel")]
    let results = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| runtime(format!("starting worker pool: {e}")))?
        .install(go);
    #[cfg(not(feature = "parallel"))]
    let results = go();
    results
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| runtime(format!("replicate {i} (seed {}): {e}", chain.seed.wrapping_add(i as u64)))))
        .collect()
}

/// Runs every replicate and writes samples, diagnostics, maps and a summary.
/// Returns the summary text.
pub fn cmd_run(cfg: &RunConfig, jobs: usize) -> CliResult<String> {
    let results = run_all(cfg, jobs)?;
    let dir = &cfg.output.dir;
    fs::create_dir_all(dir).map_err(|e| runtime(format!("creating {}: {e}", dir.display())))?;
    let method = cfg.method_name();

    let mut reports = Vec::with_capacity(results.len());
    let mut adaptations = Vec::new();
    for (i, res) in results.iter().enumerate() {
        write_file(&dir.join(format!("samples_rep{i}.txt")), &write_samples(&res.samples, res.seed))?;
        let mut rep = EssReport::from_chain(res).map_err(|e| runtime(format!("diagnostics for replicate {i}: {e}")))?;
        rep.proposal = method.clone();
        reports.push(rep);
        adaptations.extend(res.adaptations.iter().map(|a| AdaptationSummary::new(i, a)));
        if cfg.sampler() == Sampler::TransportMap {
            let maps = dir.join("maps");
            fs::create_dir_all(&maps).map_err(|e| runtime(format!("creating {}: {e}", maps.display())))?;
            for a in &res.adaptations {
                if let Some(m) = &a.map {
                    write_file(&maps.join(format!("rep{i}_step{}.txt", a.step)), &m.to_text())?;
                }
            }
            if let Some(m) = &res.final_map {
                write_file(&maps.join(format!("rep{i}_final.txt")), &m.to_text())?;
            }
        }
    }
    write_file(&dir.join("diagnostics.json"), &to_json(&reports))?;
    write_file(&dir.join("adaptations.json"), &to_json(&adaptations))?;
    if let Ok(p) = problem_by_name(&cfg.problem.name) {
        if let Some(d) = p.dataset {
            write_file(&dir.join("dataset.txt"), &d.to_text())?;
        }
    }
    let table = efficiency_table(&[(method.clone(), reports.clone())], None).map_err(|e| runtime(e.to_string()))?;
    let summary = render_summary(cfg, &method, &results, &reports, &table);
    write_file(&dir.join("summary.txt"), &summary)?;
    Ok(summary)
}

fn render_summary(cfg: &RunConfig, method: &str, results: &[ChainResult], reports: &[EssReport], table: &EfficiencyTable) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "problem: {}", cfg.problem.name);
    let _ = writeln!(s, "method: {method}");
    let _ = writeln!(
        s,
        "steps: {}  burn-in: {}  adapt interval: {}  replicates: {}",
        cfg.chain.steps, cfg.chain.burn_in, cfg.chain.adapt_interval, cfg.chain.replicates
    );
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:>4} {:>20} {:>10} {:>9} {:>10} {:>10} {:>6} {:>12} {:>9}",
        "rep", "seed", "accept", "tau_max", "min ESS", "ESS/eval", "adapt", "sigma2_M", "secs"
    );
    for (i, (res, rep)) in results.iter().zip(reports).enumerate() {
        let s2 = res.adaptations.last().map_or(f64::INFINITY, |a| a.sigma2_after);
        let _ = writeln!(
            s,
            "{i:>4} {:>20} {:>10.4} {:>9.2} {:>10.1} {:>10.3e} {:>6} {:>12.4e} {:>9.2}",
            res.seed,
            res.acceptance_rate(),
            rep.tau_max,
            rep.min_ess,
            rep.ess_per_eval,
            res.adaptations.len(),
            s2,
            rep.elapsed_secs
        );
    }
    let _ = writeln!(s);
    s.push_str(&table.to_text());
    s
}

/// Fits a map to the samples in `path` and writes it to `output`. Returns a
/// report with the objective and Newton iterations per component.
pub fn cmd_fitmap(
    path: &Path,
    basis: &str,
    family: PolynomialFamily,
    opt: &OptimizerConfig,
    output: &Path,
    jobs: usize,
) -> CliResult<String> {
    let text = fs::read_to_string(path).map_err(|e| input(format!("reading {}: {e}", path.display())))?;
    let (_, samples) = read_samples(&text).map_err(|e| input(format!("{}: {e}", path.display())))?;
    if samples.is_empty() {
        return Err(input(format!("{}: no samples", path.display())));
    }
    let spec = parse_basis(basis, family).map_err(input)?;
    opt.validate().map_err(|e| input(e.to_string()))?;
    let sets = spec.build(samples.dim()).map_err(|e| input(e.to_string()))?;
    let exec = if jobs > 1 { Execution::Parallel } else { Execution::Sequential };
    let fit = fit_map(&samples, sets, family, opt, None, exec).map_err(|e| runtime(format!("fitting map: {e}")))?;
    write_file(output, &fit.map.to_text())?;
    let mut s = String::new();
    let total: f64 = fit.reports.iter().map(|r| r.final_objective()).sum();
    let _ = writeln!(s, "samples: {} x {}", samples.rows(), samples.dim());
    let _ = writeln!(s, "final objective: {total:.10e}");
    for (i, r) in fit.reports.iter().enumerate() {
        let _ = writeln!(
            s,
            "component {i}: newton iterations {}, objective {:.10e}, coefficients {:?}",
            r.iterations,
            r.final_objective(),
            r.coefficients
        );
    }
    Ok(s)
}

/// Reads `diagnostics.json` from each directory and builds the table.
pub fn cmd_compare(dirs: &[PathBuf], baseline: Option<&str>) -> CliResult<EfficiencyTable> {
    if dirs.len() < 2 {
        return Err(input("compare needs at least two result directories"));
    }
    let mut sets: Vec<(String, Vec<EssReport>)> = Vec::with_capacity(dirs.len());
    for d in dirs {
        let p = d.join("diagnostics.json");
        let text = fs::read_to_string(&p).map_err(|e| input(format!("reading {}: {e}", p.display())))?;
        let reports: Vec<EssReport> = serde_json::from_str(&text).map_err(|e| input(format!("{}: {e}", p.display())))?;
        let Some(first) = reports.first() else {
            return Err(input(format!("{}: no records", p.display())));
        };
        let mut label = first.proposal.clone();
        let mut n = 2;
        while sets.iter().any(|(l, _)| *l == label) {
            label = format!("{}#{n}", first.proposal);
            n += 1;
        }
        sets.push((label, reports));
    }
    efficiency_table(&sets, baseline).map_err(|e| input(e.to_string()))
}
