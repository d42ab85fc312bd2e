//! Row-major sample matrices and the whitespace-delimited sample file format.
//!
//! A sample file starts with a header line `# dim=<n> steps=<L> seed=<S>`
//! followed by one whitespace-separated row per state. Values are written
//! with 17 significant digits so files round-trip exactly.

use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::transport_map::fmt_f64;

/// A `rows x dim` matrix of states stored row by row.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SampleMatrix {
    pub fn new(dim: usize) -> Self {
        SampleMatrix {
            dim,
            data: Vec::new(),
        }
    }

    pub fn with_capacity(dim: usize, rows: usize) -> Self {
        SampleMatrix {
            dim,
            data: Vec::with_capacity(dim * rows),
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(dim: usize, rows: &[R]) -> Result<Self> {
        let mut m = SampleMatrix::with_capacity(dim, rows.len());
        for r in rows {
            m.push(r.as_ref())?;
        }
        Ok(m)
    }

    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::InvalidArgument(format!(
                "{} values do not form rows of length {dim}",
                data.len()
            )));
        }
        Ok(SampleMatrix { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        check_dim(self.dim, row.len())?;
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn iter_range(&self, range: Range<usize>) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data[range.start * self.dim..range.end * self.dim].chunks_exact(self.dim.max(1))
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Column `k` as an owned series.
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.iter().map(|r| r[k]).collect()
    }

    /// Rows `range` as a new matrix.
    pub fn slice_rows(&self, range: Range<usize>) -> SampleMatrix {
        SampleMatrix {
            dim: self.dim,
            data: self.data[range.start * self.dim..range.end * self.dim].to_vec(),
        }
    }

    pub fn max_row_norm(&self) -> f64 {
        self.iter()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

/// Header fields of a sample file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleHeader {
    pub dim: usize,
    pub steps: usize,
    pub seed: u64,
}

pub fn write_samples(samples: &SampleMatrix, seed: u64) -> String {
    let mut s = String::with_capacity(samples.as_flat().len() * 25 + 64);
    let _ = writeln!(s, "# dim={} steps={} seed={}", samples.dim(), samples.rows(), seed);
    for row in samples.iter() {
        let mut first = true;
        for v in row {
            if !first {
                s.push(' ');
            }
            s.push_str(&fmt_f64(*v));
            first = false;
        }
        s.push('\n');
    }
    s
}

/// Parses a sample file. The header is optional; without it the dimension is
/// taken from the first data row. Other `#` lines are ignored.
pub fn read_samples(text: &str) -> Result<(Option<SampleHeader>, SampleMatrix)> {
    let mut header = None;
    let mut dim = None;
    let mut data = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if header.is_none() && dim.is_none() {
                if let Some(h) = parse_header(rest, lineno)? {
                    dim = Some(h.dim);
                    header = Some(h);
                }
            }
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>().map_err(|e| Error::Parse {
                    line: lineno,
                    message: format!("bad value '{t}': {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let d = *dim.get_or_insert(row.len());
        if row.len() != d {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected {d} columns, found {}", row.len()),
            });
        }
        data.extend(row);
    }
    let dim = dim.ok_or(Error::Parse {
        line: 0,
        message: "no samples found".into(),
    })?;
    if data.is_empty() {
        return Err(Error::Parse {
            line: 0,
            message: "no samples found".into(),
        });
    }
    Ok((header, SampleMatrix::from_flat(dim, data)?))
}

fn parse_header(rest: &str, lineno: usize) -> Result<Option<SampleHeader>> {
    let mut dim = None;
    let mut steps = None;
    let mut seed = None;
    for tok in rest.split_whitespace() {
        let Some((k, v)) = tok.split_once('=') else {
            return Ok(None);
        };
        let bad = |e: std::num::ParseIntError| Error::Parse {
            line: lineno,
            message: format!("bad header field '{tok}': {e}"),
        };
        match k {
            "dim" => dim = Some(v.parse::<usize>().map_err(bad)?),
            "steps" => steps = Some(v.parse::<usize>().map_err(bad)?),
            "seed" => seed = Some(v.parse::<u64>().map_err(bad)?),
            _ => return Ok(None),
        }
    }
    match (dim, steps, seed) {
        (Some(dim), Some(steps), Some(seed)) if dim > 0 => Ok(Some(SampleHeader { dim, steps, seed })),
        _ => Ok(None),
    }
}
