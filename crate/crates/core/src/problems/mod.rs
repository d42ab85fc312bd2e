//! Built-in targets, registered by name.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::target::Target;
use crate::transport_map::fmt_f64;

pub mod banana;
pub mod bod;
pub mod gaussian;
pub mod ode;
pub mod predprey;

pub use banana::BananaTarget;
pub use bod::BodTarget;
pub use gaussian::GaussianTarget;
pub use predprey::PredPreyTarget;

/// Observations: one row of observables per time.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub names: Vec<String>,
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl Dataset {
    /// `# t <names...>` header, then whitespace-separated rows.
    pub fn to_text(&self) -> String {
        let mut s = format!("# t {}\n", self.names.join(" "));
        for (t, row) in self.times.iter().zip(&self.values) {
            s.push_str(&fmt_f64(*t));
            for v in row {
                let _ = write!(s, " {}", fmt_f64(*v));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut names = Vec::new();
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(h) = line.strip_prefix('#') {
                names = h.split_whitespace().skip(1).map(String::from).collect();
                continue;
            }
            let nums = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>().map_err(|e| Error::Parse {
                        line: i + 1,
                        message: format!("bad value '{t}': {e}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if nums.len() != names.len() + 1 {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected {} columns, found {}", names.len() + 1, nums.len()),
                });
            }
            times.push(nums[0]);
            values.push(nums[1..].to_vec());
        }
        if times.is_empty() {
            return Err(Error::Parse {
                line: 0,
                message: "no observations".into(),
            });
        }
        Ok(Dataset { names, times, values })
    }
}

/// A named target with its default starting point and dataset.
pub struct Problem {
    pub name: &'static str,
    pub target: Box<dyn Target>,
    pub theta0: Vec<f64>,
    pub dataset: Option<Dataset>,
}

impl std::fmt::Debug for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Problem")
            .field("name", &self.name)
            .field("dim", &self.target.dim())
            .field("theta0", &self.theta0)
            .finish()
    }
}

pub const PROBLEM_NAMES: [&str; 4] = ["gaussian", "banana", "bod", "predprey"];

pub fn problem_by_name(name: &str) -> Result<Problem> {
    match name {
        "gaussian" => Ok(Problem {
            name: "gaussian",
            target: Box::new(GaussianTarget::correlated_2d()),
            theta0: vec![0.0, 0.0],
            dataset: None,
        }),
        "banana" => Ok(Problem {
            name: "banana",
            target: Box::new(BananaTarget::default()),
            theta0: vec![0.0, 0.0],
            dataset: None,
        }),
        "bod" => {
            let d = bod::synthesize_bod(bod::BOD_DATA_SEED, bod::BOD_NOISE_VAR);
            let t = BodTarget::from_dataset(&d, bod::BOD_NOISE_VAR)?;
            Ok(Problem {
                name: "bod",
                theta0: t.mode(),
                target: Box::new(t),
                dataset: Some(d),
            })
        }
        "predprey" | "predator-prey" => {
            let d = predprey::synthesize_predprey(predprey::PREDPREY_DATA_SEED, predprey::PREDPREY_NOISE_VAR)?;
            Ok(Problem {
                name: "predprey",
                target: Box::new(PredPreyTarget::new(&d, predprey::PREDPREY_NOISE_VAR)?),
                theta0: vec![1.0; 8],
                dataset: Some(d),
            })
        }
        other => Err(Error::InvalidArgument(format!(
            "unknown problem '{other}' (expected one of {})",
            PROBLEM_NAMES.join(", ")
        ))),
    }
}
