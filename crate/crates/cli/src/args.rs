use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use typtab::sampler::Block;
use typtab::spectral::Normalization;
use typtab::{Alpha0, BaseMeasure};

const MEASURE_HELP: &str = "Base measure as family[:p1,p2], e.g. poisson, counting, binomial:5, gamma:1,2";
const MARGIN_HELP: &str = "Margin file: JSON {\"r\":[..],\"c\":[..]} or CSV lines `r,v1,..` and `c,v1,..`";

/// Typical tables, phase diagrams and spectral checks for random matrices
/// with prescribed margins.
///
/// JSON outputs carry top-level "schema" and "command" fields. CSV outputs
/// begin with a `# typtab schema 1` comment line, then a header row.
/// Non-finite floats in JSON are written as the strings "inf", "-inf", "nan".
///
/// Exit codes: 0 success, 1 bad input, 2 numerical or runtime failure.
#[derive(Debug, Parser)]
#[command(name = "typtab", version)]
pub struct Cli {
    /// Worker threads (defaults to all cores). Output does not depend on it.
    #[arg(long, global = true, env = "TYPTAB_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    Solve(SolveArgs),
    Phase(PhaseArgs),
    EgCheck(EgArgs),
    Sample(SampleArgs),
    VerifyMixture(MixtureArgs),
    VerifyCut(CutArgs),
    Esd(EsdArgs),
    Dyson(DysonArgs),
    Stability(StabilityArgs),
    #[command(subcommand)]
    Margin(MarginCommand),
}

/// Solve for the maximum-likelihood tilts and the typical table.
///
/// JSON fields: measure, m, n, alpha, beta, z (row-major typical table) and
/// report (iterations, residuals, dual gaps, rate estimate, realized_delta, ...).
#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long, help = MEASURE_HELP)]
    pub measure: BaseMeasure,
    #[arg(long, help = MARGIN_HELP)]
    pub margin: PathBuf,
    /// L1 margin-residual tolerance [default: 1e-8 * max(1, sum r)]
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, default_value_t = 10_000)]
    pub max_iters: usize,
    /// Initial row potentials: `zero` or `random:<seed>`
    #[arg(long, default_value = "zero", value_parser = parse_alpha0)]
    pub alpha0: Alpha0,
    /// Output file [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Classify (s, t) pairs as tame or not.
///
/// CSV columns: s, t, verdict (tame | non_tame | boundary | inconclusive),
/// criterion, witness (critical ratio, empty if unknown), slack (signed
/// slack of the defining inequality, positive on the tame side).
/// Grid points with s > t are skipped.
#[derive(Debug, Args)]
pub struct PhaseArgs {
    #[arg(long, help = MEASURE_HELP)]
    pub measure: BaseMeasure,
    #[arg(long, required_unless_present = "grid", conflicts_with = "grid", requires = "t")]
    pub s: Option<f64>,
    #[arg(long, required_unless_present = "grid", conflicts_with = "grid")]
    pub t: Option<f64>,
    /// Grid `s0:s1:ks,t0:t1:kt` of ks × kt equally spaced points
    #[arg(long, value_parser = parse_grid2)]
    pub grid: Option<(Range, Range)>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Quadratically deep Erdős–Gallai test for a symmetric margin.
///
/// JSON fields: satisfied, min_value, argmin_size, bounds_ok.
#[derive(Debug, Args)]
pub struct EgArgs {
    #[arg(long, help = MARGIN_HELP)]
    pub margin: PathBuf,
    /// Upper bound B of the entry range
    #[arg(long = "B", alias = "b")]
    pub b: f64,
    #[arg(long)]
    pub c1: f64,
    #[arg(long)]
    pub c3: f64,
    /// Optional upper bound on r(i)/n
    #[arg(long)]
    pub c2: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SampleMethod {
    /// Independent entries from the tilted model.
    Tilted,
    /// Tilted draws kept when their margins are within --rho in L1.
    Rejection,
    /// Exact conditional draws (Gaussian base only).
    GaussianConditional,
}

/// Draw random tables.
///
/// CSV columns: sample (draw index), row, col, value.
#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long, help = MEASURE_HELP)]
    pub measure: BaseMeasure,
    #[arg(long, help = MARGIN_HELP)]
    pub margin: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = SampleMethod::Tilted)]
    pub method: SampleMethod,
    /// L1 margin tolerance for rejection (0 = exact match)
    #[arg(long, default_value_t = 0.0)]
    pub rho: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Compare the conditional law of a uniformly chosen block entry with the
/// tilted mixture over the same block.
///
/// CSV columns: support (value, or bin index for continuous measures),
/// conditional, tilted (probabilities). The summary (tv, method, ...) is
/// printed to stderr and optionally written as JSON.
#[derive(Debug, Args)]
pub struct MixtureArgs {
    #[arg(long, help = MEASURE_HELP)]
    pub measure: BaseMeasure,
    #[arg(long, help = MARGIN_HELP)]
    pub margin: PathBuf,
    /// Block `i0:i1,j0:j1` (half-open) [default: whole table]
    #[arg(long)]
    pub block: Option<Block>,
    /// Rejection samples when no exact method applies
    #[arg(long, default_value_t = 20_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Equal-probability bins for continuous measures
    #[arg(long, default_value_t = 64)]
    pub bins: usize,
    /// Rejection tolerance [default: ρ* for continuous, exact for discrete]
    #[arg(long)]
    pub rho: Option<f64>,
    /// Use rejection even when an exact method applies
    #[arg(long)]
    pub force_rejection: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the JSON summary here
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

/// Cut distance between sampled tables and the typical table along clones.
///
/// CSV columns: k (clone factor), m, n, samples, mean, std_err,
/// exact (all cut norms exact), conditional_mean (empty if not enumerable).
#[derive(Debug, Args)]
pub struct CutArgs {
    #[arg(long, help = MEASURE_HELP)]
    pub measure: BaseMeasure,
    #[arg(long, help = MARGIN_HELP)]
    pub margin: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub clone_max: usize,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Empirical singular value distribution of sampled, centred tables.
///
/// Histogram CSV columns: bin_lo, bin_hi, density. `--values` CSV columns:
/// sample, index, value (ascending singular values per sample). The JSON
/// summary has Kolmogorov–Smirnov distances to the quarter-circle law and,
/// for the squared values, to Marchenko–Pastur.
#[derive(Debug, Args)]
pub struct EsdArgs {
    #[arg(long, help = MEASURE_HELP)]
    pub measure: BaseMeasure,
    #[arg(long, help = MARGIN_HELP)]
    pub margin: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `square` (s*·n), `half-sum` ((m+n)s*/2) or a positive number
    #[arg(long, default_value = "square", value_parser = parse_normalization)]
    pub normalization: Normalization,
    #[arg(long, value_enum, default_value_t = SampleMethod::Tilted)]
    pub method: SampleMethod,
    #[arg(long, default_value_t = 0.0)]
    pub rho: f64,
    #[arg(long, default_value_t = 50)]
    pub bins: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub values: Option<PathBuf>,
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

/// Limiting singular value density from the Dyson equation of the variance
/// profile.
///
/// CSV columns: x (singular value), density, eigen_density (density of
/// λ = x²). The JSON summary has the grid mass, tail mass and sup distance
/// to the quarter circle.
#[derive(Debug, Args)]
pub struct DysonArgs {
    #[arg(long, help = MEASURE_HELP)]
    pub measure: BaseMeasure,
    #[arg(long, help = MARGIN_HELP)]
    pub margin: PathBuf,
    /// Grid `x0:x1:k` inside (0, 2.5]
    #[arg(long, default_value = "0.01:2.5:200", value_parser = parse_range)]
    pub grid: Range,
    /// Smoothing Im w, in [0.01, 0.1]
    #[arg(long, default_value_t = 0.02)]
    pub eta: f64,
    #[arg(long, default_value = "square", value_parser = parse_normalization)]
    pub normalization: Normalization,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

/// Lipschitz stability of the typical table between two margins.
///
/// JSON fields: delta, c_delta, psi_dd_sup, margin_l1, lhs, rhs, ratio, holds.
#[derive(Debug, Args)]
pub struct StabilityArgs {
    #[arg(long, help = MEASURE_HELP)]
    pub measure: BaseMeasure,
    #[arg(long)]
    pub margin_a: PathBuf,
    #[arg(long)]
    pub margin_b: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MarginFormat {
    Json,
    Csv,
}

/// Build margin files (readable by every `--margin` option).
#[derive(Debug, Subcommand)]
pub enum MarginCommand {
    /// k-fold clone: every entry scaled by k and repeated k times.
    Clone {
        #[arg(long, help = MARGIN_HELP)]
        margin: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, value_enum, default_value_t = MarginFormat::Json)]
        format: MarginFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Symmetric n×n margin: ⌊n^ρ⌋ lines at t·n, the rest at s·n.
    Barvinok {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        s: f64,
        #[arg(long)]
        t: f64,
        #[arg(long)]
        rho: f64,
        #[arg(long, value_enum, default_value_t = MarginFormat::Json)]
        format: MarginFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// `lo:hi:points`, inclusive at both ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl FromStr for Range {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("`{s}` is not of the form lo:hi:points");
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        let [lo, hi, k] = parts[..] else { return Err(bad()) };
        let lo: f64 = lo.parse().map_err(|_| bad())?;
        let hi: f64 = hi.parse().map_err(|_| bad())?;
        let points: usize = k.parse().map_err(|_| bad())?;
        if points == 0 || !(lo.is_finite() && hi.is_finite()) || hi < lo {
            return Err(bad());
        }
        Ok(Self { lo, hi, points })
    }
}

fn parse_range(s: &str) -> Result<Range, String> {
    s.parse()
}

fn parse_grid2(s: &str) -> Result<(Range, Range), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("`{s}` is not of the form s0:s1:k,t0:t1:k"))?;
    Ok((a.parse()?, b.parse()?))
}

fn parse_alpha0(s: &str) -> Result<Alpha0, String> {
    match s.split_once(':') {
        None if s == "zero" => Ok(Alpha0::Zero),
        Some(("random", seed)) => seed
            .parse()
            .map(Alpha0::Random)
            .map_err(|_| format!("bad seed `{seed}`")),
        _ => Err(format!("`{s}`: expected `zero` or `random:<seed>`")),
    }
}

fn parse_normalization(s: &str) -> Result<Normalization, String> {
    match s {
        "square" => Ok(Normalization::Square),
        "half-sum" => Ok(Normalization::HalfSum),
        v => match v.parse::<f64>() {
            Ok(x) if x > 0.0 && x.is_finite() => Ok(Normalization::Fixed(x)),
            _ => Err(format!("`{v}`: expected square, half-sum or a positive number")),
        },
    }
}
