use std::io::Write;
use std::path::Path;

use serde::Serialize;

use typtab::sampler::{
    cut_clone_sequence, mixture_tv_experiment, rejection_sample, sample_gaussian_conditional, sample_model, Block,
    MixtureConfig, MixtureMethod, RejectionConfig, TableEnsemble,
};
use typtab::spectral::{
    dyson_density, esd, linspace, mp_distance, quarter_circle_distance, s_star, variance_profile, DysonConfig,
    EsdResult, Histogram,
};
use typtab::stability::{stability, StabilityReport};
use typtab::tameness::{classify, erdos_gallai_deep};
use typtab::{solve, BaseMeasure, Family, Margin, Solution, SolverConfig};

use crate::args::*;
use crate::output::*;
use crate::CliError;

pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Solve(a) => solve_cmd(a),
        Command::Phase(a) => phase_cmd(a),
        Command::EgCheck(a) => eg_cmd(a),
        Command::Sample(a) => sample_cmd(a),
        Command::VerifyMixture(a) => mixture_cmd(a),
        Command::VerifyCut(a) => cut_cmd(a),
        Command::Esd(a) => esd_cmd(a),
        Command::Dyson(a) => dyson_cmd(a),
        Command::Stability(a) => stability_cmd(a),
        Command::Margin(a) => margin_cmd(a),
    }
}

fn load(path: &Path) -> Result<Margin, CliError> {
    Margin::load(path).map_err(|e| match e {
        typtab::Error::Io(io) => CliError::Io { path: path.to_path_buf(), source: io },
        other => other.into(),
    })
}

fn solve_cmd(a: SolveArgs) -> Result<(), CliError> {
    let margin = load(&a.margin)?;
    let mut cfg = SolverConfig::default().with_alpha0(a.alpha0).with_max_iters(a.max_iters);
    if let Some(tol) = a.tol {
        cfg = cfg.with_tol(tol);
    }
    let sol = solve(&a.measure, &margin, &cfg)?;
    let out = SolveOutput {
        measure: a.measure.to_string(),
        m: margin.m(),
        n: margin.n(),
        alpha: sol.potentials.alpha,
        beta: sol.potentials.beta,
        z: sol.table.z,
        report: sol.report,
    };
    write_json(a.out.as_deref(), "solve", &out)
}

fn phase_cmd(a: PhaseArgs) -> Result<(), CliError> {
    let points: Vec<(f64, f64)> = match (a.grid, a.s, a.t) {
        (Some((rs, rt)), _, _) => {
            let ts = linspace(rt.lo, rt.hi, rt.points);
            linspace(rs.lo, rs.hi, rs.points)
                .into_iter()
                .flat_map(|s| ts.iter().map(move |&t| (s, t)))
                .filter(|(s, t)| s <= t)
                .collect()
        }
        (None, Some(s), Some(t)) => vec![(s, t)],
        _ => return Err(CliError::Usage("need --s and --t, or --grid".into())),
    };
    let rows = points
        .into_iter()
        .map(|(s, t)| {
            let v = classify(&a.measure, s, t)?;
            Ok(PhaseRow {
                s,
                t,
                verdict: v.region.to_string(),
                criterion: v.criterion_used,
                witness: v.witness,
                slack: v.slack,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    write_csv(a.out.as_deref(), &rows)
}

fn eg_cmd(a: EgArgs) -> Result<(), CliError> {
    let margin = load(&a.margin)?;
    let v = erdos_gallai_deep(&margin, a.b, a.c1, a.c3, a.c2)?;
    write_json(a.out.as_deref(), "eg-check", &v)
}

fn draw(
    measure: &BaseMeasure,
    margin: &Margin,
    sol: &Solution,
    method: SampleMethod,
    count: usize,
    seed: u64,
    rho: f64,
) -> Result<TableEnsemble, CliError> {
    Ok(match method {
        SampleMethod::Tilted => sample_model(measure, &sol.potentials, count, seed)?,
        SampleMethod::Rejection => {
            let cfg = RejectionConfig {
                count,
                rho,
                seed,
                ..RejectionConfig::default()
            };
            let (ens, stats) = rejection_sample(measure, margin, &sol.potentials, &cfg)?;
            eprintln!(
                "rejection: accepted {} of {} (rate {:.3e})",
                stats.accepted, stats.attempts, stats.rate
            );
            ens
        }
        SampleMethod::GaussianConditional => {
            if measure.family() != Family::Gaussian {
                return Err(CliError::Usage(format!(
                    "gaussian-conditional needs the gaussian measure, got {measure}"
                )));
            }
            sample_gaussian_conditional(&sol.table, count, seed)
        }
    })
}

fn sample_cmd(a: SampleArgs) -> Result<(), CliError> {
    let margin = load(&a.margin)?;
    let sol = solve(&a.measure, &margin, &SolverConfig::default().without_diagnostics())?;
    let ens = draw(&a.measure, &margin, &sol, a.method, a.count, a.seed, a.rho)?;
    let n = ens.n;
    let rows: Vec<SampleRow> = ens
        .samples
        .iter()
        .enumerate()
        .flat_map(|(k, t)| {
            t.iter().enumerate().map(move |(idx, &value)| SampleRow {
                sample: k,
                row: idx / n,
                col: idx % n,
                value,
            })
        })
        .collect();
    write_csv(a.out.as_deref(), &rows)
}

fn mixture_cmd(a: MixtureArgs) -> Result<(), CliError> {
    let margin = load(&a.margin)?;
    let block = a.block.unwrap_or_else(|| Block::full(margin.m(), margin.n()));
    let cfg = MixtureConfig {
        samples: a.samples,
        seed: a.seed,
        bins: a.bins,
        rho: a.rho,
        force_rejection: a.force_rejection,
        ..MixtureConfig::default()
    };
    let res = mixture_tv_experiment(&a.measure, &margin, &block, &cfg, &SolverConfig::default().without_diagnostics())?;
    let (method, accepted, attempts, rho) = match res.method {
        MixtureMethod::Transfer => ("transfer", None, None, None),
        MixtureMethod::Enumeration => ("enumeration", None, None, None),
        MixtureMethod::Rejection { accepted, attempts, rho } => ("rejection", Some(accepted), Some(attempts), Some(rho)),
    };
    let summary = MixtureSummary {
        measure: a.measure.to_string(),
        block: block.to_string(),
        block_size: res.block_size,
        tv: res.tv,
        method: method.into(),
        accepted,
        attempts,
        rho,
        binned: res.conditional.edges.is_some(),
        bin_edges: res.conditional.edges.clone(),
    };
    eprintln!("tv = {:.6e} over {} cells ({method})", res.tv, res.block_size);
    write_csv(a.out.as_deref(), &MixtureRow::from_laws(&res.conditional, &res.tilted))?;
    if let Some(p) = a.summary.as_deref() {
        write_json(Some(p), "verify-mixture", &summary)?;
    }
    Ok(())
}

fn cut_cmd(a: CutArgs) -> Result<(), CliError> {
    let margin = load(&a.margin)?;
    if a.clone_max == 0 {
        return Err(CliError::Usage("--clone-max must be at least 1".into()));
    }
    let runs = cut_clone_sequence(
        &a.measure,
        &margin,
        a.clone_max,
        a.samples,
        a.seed,
        &SolverConfig::default().without_diagnostics(),
    )?;
    let rows: Vec<CutRow> = runs
        .into_iter()
        .enumerate()
        .map(|(i, e)| CutRow {
            k: i + 1,
            m: e.m,
            n: e.n,
            samples: e.distances.len(),
            mean: e.mean,
            std_err: e.std_err,
            exact: e.exact,
            conditional_mean: e.conditional_mean,
        })
        .collect();
    write_csv(a.out.as_deref(), &rows)
}

fn esd_cmd(a: EsdArgs) -> Result<(), CliError> {
    let margin = load(&a.margin)?;
    if a.samples == 0 || a.bins == 0 {
        return Err(CliError::Usage("--samples and --bins must be at least 1".into()));
    }
    let (m, n) = (margin.m(), margin.n());
    let sol = solve(&a.measure, &margin, &SolverConfig::default().without_diagnostics())?;
    let star = s_star(&a.measure, &sol.potentials);
    let ens = draw(&a.measure, &margin, &sol, a.method, a.samples, a.seed, a.rho)?;
    let per_sample = ens
        .samples
        .iter()
        .map(|t| esd(t, &sol.table.z, m, n, star, a.normalization))
        .collect::<typtab::Result<Vec<EsdResult>>>()?;

    let pooled: Vec<f64> = {
        let mut v: Vec<f64> = per_sample.iter().flat_map(|e| e.singular_values.iter().copied()).collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let factor = a.normalization.factor(m, n, star);
    let top = pooled.last().copied().unwrap_or(0.0).max(2.5);
    let hist = Histogram::new(&pooled, 0.0, top, a.bins);
    let combined = EsdResult {
        m,
        n,
        singular_values: pooled.clone(),
        s_star: star,
        normalization: a.normalization,
        factor,
        histogram: hist.clone(),
    };

    // Eigenvalues of (1/(n s*)) (Y−Z)(Y−Z)ᵀ, including the m − n zeros of a
    // tall matrix.
    let to_mp = factor / (n as f64 * star);
    let zeros = m.saturating_sub(n) * per_sample.len();
    let eigs: Vec<f64> = pooled
        .iter()
        .map(|s| s * s * to_mp)
        .chain(std::iter::repeat_n(0.0, zeros))
        .collect();
    let kappa = m as f64 / n as f64;
    let summary = EsdSummary {
        measure: a.measure.to_string(),
        m,
        n,
        samples: per_sample.len(),
        s_star: star,
        normalization: a.normalization,
        factor,
        second_moment: combined.second_moment(),
        quarter_circle_ks: if m == n { Some(quarter_circle_distance(&combined)?) } else { None },
        mp_ks: mp_distance(&eigs, kappa)?,
        kappa,
    };

    let rows: Vec<HistRow> = hist
        .edges
        .windows(2)
        .zip(&hist.densities)
        .map(|(e, &density)| HistRow {
            bin_lo: e[0],
            bin_hi: e[1],
            density,
        })
        .collect();
    write_csv(a.out.as_deref(), &rows)?;
    if let Some(p) = a.values.as_deref() {
        let values: Vec<ValueRow> = per_sample
            .iter()
            .enumerate()
            .flat_map(|(k, e)| {
                e.singular_values
                    .iter()
                    .enumerate()
                    .map(move |(index, &value)| ValueRow { sample: k, index, value })
            })
            .collect();
        write_csv(Some(p), &values)?;
    }
    if let Some(p) = a.summary.as_deref() {
        write_json(Some(p), "esd", &summary)?;
    }
    Ok(())
}

fn dyson_cmd(a: DysonArgs) -> Result<(), CliError> {
    if !(0.01..=0.1).contains(&a.eta) {
        return Err(CliError::Usage(format!("--eta must lie in [0.01, 0.1], got {}", a.eta)));
    }
    if !(a.grid.lo > 0.0 && a.grid.hi <= 2.5) {
        return Err(CliError::Usage("--grid must lie inside (0, 2.5]".into()));
    }
    let margin = load(&a.margin)?;
    let (m, n) = (margin.m(), margin.n());
    let sol = solve(&a.measure, &margin, &SolverConfig::default().without_diagnostics())?;
    let profile = variance_profile(&a.measure, &sol.potentials);
    let factor = a.normalization.factor(m, n, s_star(&a.measure, &sol.potentials));
    let grid = linspace(a.grid.lo, a.grid.hi, a.grid.points);
    let curve = dyson_density(&profile, m, n, factor, &grid, a.eta, &DysonConfig::default())?;
    let rows: Vec<DensityRow> = curve
        .grid
        .iter()
        .zip(&curve.density)
        .zip(&curve.eigen_density)
        .map(|((&x, &density), &eigen_density)| DensityRow {
            x,
            density,
            eigen_density,
        })
        .collect();
    write_csv(a.out.as_deref(), &rows)?;
    if let Some(p) = a.summary.as_deref() {
        let summary = DysonSummary {
            measure: a.measure.to_string(),
            m,
            n,
            normalization: a.normalization,
            factor,
            eta: curve.eta,
            mass: curve.mass(),
            tail_mass: curve.tail_mass,
            total_mass: curve.total_mass(),
            quarter_circle_sup_distance: curve.quarter_circle_sup_distance(),
            coordinates: curve.coordinates.clone(),
        };
        write_json(Some(p), "dyson", &summary)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct StabilityOutput {
    #[serde(flatten)]
    report: StabilityReport,
    holds: bool,
}

fn stability_cmd(a: StabilityArgs) -> Result<(), CliError> {
    let ma = load(&a.margin_a)?;
    let mb = load(&a.margin_b)?;
    let report = stability(&a.measure, &ma, &mb, &SolverConfig::default().without_diagnostics())?;
    let holds = report.holds();
    write_json(a.out.as_deref(), "stability", &StabilityOutput { report, holds })
}

fn margin_cmd(a: MarginCommand) -> Result<(), CliError> {
    let (margin, format, out) = match a {
        MarginCommand::Clone { margin, k, format, out } => (load(&margin)?.clone_k(k)?, format, out),
        MarginCommand::Barvinok {
            n,
            s,
            t,
            rho,
            format,
            out,
        } => (Margin::barvinok(n, s, t, rho)?, format, out),
    };
    let text = match format {
        MarginFormat::Json => margin.to_json() + "\n",
        MarginFormat::Csv => margin.to_csv(),
    };
    let mut w = open_sink(out.as_deref())?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| CliError::Output(e.to_string()))
}
