//! Output records and their readers.
//!
//! JSON documents carry `"schema": 1` and the producing command at the top
//! level. CSV files start with a `# typtab schema 1` comment line followed
//! by a header row. Floats are written in shortest round-trip form, so
//! reading a file back reproduces the values exactly.

use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use typtab::sampler::EmpiricalLaw;
use typtab::sinkhorn::SinkhornReport;
use typtab::spectral::Normalization;

use crate::CliError;

pub const SCHEMA: u32 = 1;
const CSV_BANNER: &str = "# typtab schema 1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub schema: u32,
    pub command: String,
    #[serde(flatten)]
    pub data: T,
}

impl<T> Envelope<T> {
    pub fn new(command: &str, data: T) -> Self {
        Self {
            schema: SCHEMA,
            command: command.into(),
            data,
        }
    }
}

/// `--out` target: a file, or standard output when absent or `-`.
pub fn open_sink(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    match path {
        Some(p) if p != Path::new("-") => {
            let f = File::create(p).map_err(|e| CliError::Io { path: p.to_path_buf(), source: e })?;
            Ok(Box::new(BufWriter::new(f)))
        }
        _ => Ok(Box::new(BufWriter::new(io::stdout().lock()))),
    }
}

pub fn write_json<T: Serialize>(path: Option<&Path>, command: &str, data: &T) -> Result<(), CliError> {
    let mut w = open_sink(path)?;
    serde_json::to_writer_pretty(&mut w, &Envelope::new(command, data)).map_err(|e| CliError::Output(e.to_string()))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| CliError::Output(e.to_string()))
}

pub fn write_csv<T: Serialize>(path: Option<&Path>, rows: &[T]) -> Result<(), CliError> {
    let mut w = open_sink(path)?;
    writeln!(w, "{CSV_BANNER}").map_err(|e| CliError::Output(e.to_string()))?;
    let mut csv = csv::Writer::from_writer(w);
    for r in rows {
        csv.serialize(r).map_err(|e| CliError::Output(e.to_string()))?;
    }
    csv.flush().map_err(|e| CliError::Output(e.to_string()))
}

pub fn read_json<T: DeserializeOwned>(text: &str) -> Result<Envelope<T>, CliError> {
    let env: Envelope<T> = serde_json::from_str(text).map_err(|e| CliError::Usage(format!("bad JSON output: {e}")))?;
    if env.schema != SCHEMA {
        return Err(CliError::Usage(format!("unsupported schema {}", env.schema)));
    }
    Ok(env)
}

pub fn read_csv<T: DeserializeOwned>(text: &str) -> Result<Vec<T>, CliError> {
    if !text.starts_with(CSV_BANNER) {
        return Err(CliError::Usage("missing schema banner".into()));
    }
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes())
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| CliError::Usage(format!("bad CSV output: {e}")))
}

pub fn read_file(path: &Path) -> Result<String, CliError> {
    let mut s = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut s))
        .map_err(|e| CliError::Io { path: PathBuf::from(path), source: e })?;
    Ok(s)
}

// ---- JSON documents ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOutput {
    pub measure: String,
    pub m: usize,
    pub n: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// Row-major typical table.
    pub z: Vec<f64>,
    pub report: SinkhornReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSummary {
    pub measure: String,
    pub block: String,
    pub block_size: usize,
    pub tv: f64,
    pub method: String,
    pub accepted: Option<usize>,
    pub attempts: Option<usize>,
    pub rho: Option<f64>,
    /// Whether `support` holds bin indices rather than values.
    pub binned: bool,
    pub bin_edges: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsdSummary {
    pub measure: String,
    pub m: usize,
    pub n: usize,
    pub samples: usize,
    pub s_star: f64,
    pub normalization: Normalization,
    pub factor: f64,
    pub second_moment: f64,
    /// Kolmogorov–Smirnov distance to the quarter-circle law (square only).
    pub quarter_circle_ks: Option<f64>,
    /// Kolmogorov–Smirnov distance of the squared values to Marchenko–Pastur.
    pub mp_ks: f64,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DysonSummary {
    pub measure: String,
    pub m: usize,
    pub n: usize,
    pub normalization: Normalization,
    pub factor: f64,
    pub eta: f64,
    pub mass: f64,
    pub tail_mass: f64,
    pub total_mass: f64,
    pub quarter_circle_sup_distance: f64,
    pub coordinates: String,
}

// ---- CSV rows ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRow {
    pub s: f64,
    pub t: f64,
    pub verdict: String,
    pub criterion: String,
    pub witness: Option<f64>,
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub sample: usize,
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureRow {
    pub support: f64,
    pub conditional: f64,
    pub tilted: f64,
}

impl MixtureRow {
    /// Rows over the union of both supports, ascending.
    pub fn from_laws(conditional: &EmpiricalLaw, tilted: &EmpiricalLaw) -> Vec<Self> {
        let mut support: Vec<f64> = conditional.support.iter().chain(&tilted.support).copied().collect();
        support.sort_by(f64::total_cmp);
        support.dedup();
        support
            .into_iter()
            .map(|v| Self {
                support: v,
                conditional: conditional.prob_of(v),
                tilted: tilted.prob_of(v),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutRow {
    pub k: usize,
    pub m: usize,
    pub n: usize,
    pub samples: usize,
    pub mean: f64,
    pub std_err: f64,
    pub exact: bool,
    pub conditional_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistRow {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueRow {
    pub sample: usize,
    pub index: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityRow {
    pub x: f64,
    pub density: f64,
    pub eigen_density: f64,
}
