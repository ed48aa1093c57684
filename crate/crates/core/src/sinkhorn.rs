//! Generalized Sinkhorn iteration for the maximum-likelihood tilts.
//!
//! Given a margin `(r, c)` and a base measure, the MLE `(α, β)` maximizes
//!
//! ```text
//! g(α, β) = ⟨r, α⟩ + ⟨c, β⟩ − Σᵢⱼ ψ(α(i) + β(j))
//! ```
//!
//! and the typical table is `Z = ψ'(α ⊕ β)`. Each sweep solves, for every
//! column `j`, the scalar equation `Σᵢ ψ'(α(i) + β) = c(j)`, then the same
//! for every row against the new `β`.
//!
//! Rows (and columns) that share a potential value contribute identical
//! terms, so every evaluation works on value groups with multiplicities.
//! Block-structured margins (constant, cloned, Barvinok) therefore cost
//! `O(blocks²)` per sweep instead of `O(mn)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::margin::{Feasibility, Margin};
use crate::measure::{psi_dd_range, realized_delta, ExponentialFamily, TamenessBand};
use crate::roots::{solve_increasing, RootConfig, RootFailure};

/// Margin-band width used for the "approaching boundary" flag.
pub const DELTA_MIN: f64 = 1e-6;

/// Dual potentials `(α, β)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Potentials {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// Whether `Σα = 0`.
    pub standardized: bool,
}

impl Potentials {
    pub fn zeros(m: usize, n: usize) -> Self {
        Self {
            alpha: vec![0.0; m],
            beta: vec![0.0; n],
            standardized: true,
        }
    }

    pub fn new(alpha: Vec<f64>, beta: Vec<f64>) -> Self {
        let standardized = alpha.iter().sum::<f64>().abs() <= 1e-9 * alpha.len() as f64;
        Self { alpha, beta, standardized }
    }

    /// Shifts `(α − s, β + s)` so that `Σα = 0`.
    pub fn standardize(&mut self) {
        let s = self.alpha.iter().sum::<f64>() / self.alpha.len() as f64;
        self.alpha.iter_mut().for_each(|a| *a -= s);
        self.beta.iter_mut().for_each(|b| *b += s);
        self.standardized = true;
    }

    /// Shifts so that the means of `α` and `β` coincide.
    pub fn symmetrized(&self) -> Self {
        let ma = self.alpha.iter().sum::<f64>() / self.alpha.len() as f64;
        let mb = self.beta.iter().sum::<f64>() / self.beta.len() as f64;
        let s = 0.5 * (ma - mb);
        Self {
            alpha: self.alpha.iter().map(|a| a - s).collect(),
            beta: self.beta.iter().map(|b| b + s).collect(),
            standardized: false,
        }
    }

    pub fn tilt(&self, i: usize, j: usize) -> f64 {
        self.alpha[i] + self.beta[j]
    }

    /// `(min, max)` of `α(i) + β(j)` over all cells.
    pub fn tilt_range(&self) -> (f64, f64) {
        let (amin, amax) = min_max(&self.alpha);
        let (bmin, bmax) = min_max(&self.beta);
        (amin + bmin, amax + bmax)
    }

    /// Verifies that every tilt lies in `Θ°`.
    pub fn check_domain<M: ExponentialFamily + ?Sized>(&self, measure: &M) -> Result<()> {
        let (lo, hi) = self.tilt_range();
        measure.check_tilt(lo)?;
        measure.check_tilt(hi)
    }
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// `Z = ψ'(α ⊕ β)` with its margin residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypicalTable {
    pub m: usize,
    pub n: usize,
    /// Row-major entries.
    pub z: Vec<f64>,
    pub row_residual: f64,
    pub col_residual: f64,
    pub min_entry: f64,
    pub max_entry: f64,
}

impl TypicalTable {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.z[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.z[i * self.n..(i + 1) * self.n]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.m).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for i in 0..self.m {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        out
    }

    /// `Σᵢⱼ D(μ_{φ(zᵢⱼ)} ‖ μ)`, the primal objective. Terms are evaluated in
    /// parallel but summed in order, so the result does not depend on the
    /// thread count.
    pub fn relative_entropy<M: ExponentialFamily + ?Sized>(&self, measure: &M) -> f64 {
        let terms: Vec<f64> = self
            .z
            .par_iter()
            .map(|&v| crate::measure::relative_entropy(measure, v))
            .collect();
        terms.iter().sum()
    }

    /// Builds the table for the given potentials.
    pub fn from_potentials<M: ExponentialFamily + ?Sized>(measure: &M, margin: &Margin, p: &Potentials) -> Self {
        let (m, n) = (margin.m(), margin.n());
        let ga = Groups::of(&p.alpha);
        let gb = Groups::of(&p.beta);
        let kb = gb.values.len();
        let vals: Vec<f64> = ga
            .values
            .iter()
            .flat_map(|&a| gb.values.iter().map(move |&b| a + b))
            .map(|t| measure.psi_prime(t))
            .collect();
        let mut z = vec![0.0; m * n];
        for i in 0..m {
            let base = ga.index[i] * kb;
            for j in 0..n {
                z[i * n + j] = vals[base + gb.index[j]];
            }
        }
        let (min_entry, max_entry) = min_max(&vals);
        let mut t = Self {
            m,
            n,
            z,
            row_residual: 0.0,
            col_residual: 0.0,
            min_entry,
            max_entry,
        };
        t.row_residual = t.row_sums().iter().zip(margin.r()).map(|(a, b)| (a - b).abs()).sum();
        t.col_residual = t.col_sums().iter().zip(margin.c()).map(|(a, b)| (a - b).abs()).sum();
        t
    }
}

/// Least-squares fit of `log Δ_k` against `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    /// Fitted geometric decay ratio `exp(slope)`.
    pub ratio: f64,
    pub r_squared: f64,
    /// Iterations used in the fit.
    pub points: Vec<usize>,
    /// `1 − σ₁⁴/σ₂⁴` over the widened tilt band, when computable.
    pub theoretical_bound: Option<f64>,
    pub within_bound: Option<bool>,
}

/// Post-hoc check of the non-asymptotic convergence hypothesis
/// `φ(A_ε) + 2L ≤ α*⊕β* ≤ φ(B_ε) − 2L` with `L = ‖α₀ − α*‖∞` minimized over
/// the shift class of `α*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartCondition {
    pub linf_start_distance: f64,
    pub lower_slack: f64,
    pub upper_slack: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkhornReport {
    pub iterations: usize,
    /// `g(α_k, β_k)` after each full sweep, `k = 1..=iterations`.
    pub dual_values: Vec<f64>,
    /// `‖margin(Z_k) − (r, c)‖₁` after each full sweep.
    pub residuals: Vec<f64>,
    /// `‖(α_k ⊕ β_k) − (α_K ⊕ β_K)‖_F` against the returned iterate.
    pub potential_gaps: Vec<f64>,
    /// `g(α*, β*) − g(α_k, β_k)` against a polished reference optimum,
    /// evaluated in Bregman form to avoid cancellation.
    pub dual_gaps: Vec<f64>,
    pub converged: bool,
    pub tolerance: f64,
    pub rate_estimate: Option<RateEstimate>,
    /// Some tilt left `[φ(A_δ), φ(B_δ)]` for `δ = 1e-6`.
    pub approaching_boundary: bool,
    pub tilt_min: f64,
    pub tilt_max: f64,
    /// Largest `δ` for which the returned table is `δ`-tame.
    #[serde(with = "crate::serde_float")]
    pub realized_delta: f64,
    /// `1 − σ₁⁴/σ₂⁴` evaluated at `ε = δ/2`.
    pub contraction_bound: Option<f64>,
    pub start_condition: Option<StartCondition>,
}

/// Initial row potentials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Alpha0 {
    Zero,
    /// I.i.d. uniform entries from the given seed.
    Random(u64),
    Given(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// L¹ margin-residual tolerance; `None` means `1e-8 · max(1, Σ|r|)`.
    pub tol: Option<f64>,
    pub alpha0: Alpha0,
    /// Relative tolerance of each scalar root solve.
    pub root_tol: f64,
    /// Record the trajectory and compute dual gaps, rate and start-condition
    /// diagnostics.
    pub diagnostics: bool,
    /// Maximum number of stored trajectory values (`iterations·(m+n)`).
    pub history_limit: usize,
    /// Extra sweeps used to polish the reference optimum.
    pub polish_iters: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 10_000,
            tol: None,
            alpha0: Alpha0::Zero,
            root_tol: 1e-13,
            diagnostics: true,
            history_limit: 4_000_000,
            polish_iters: 200,
        }
    }
}

impl SolverConfig {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = Some(tol);
        self
    }
    pub fn with_alpha0(mut self, a: Alpha0) -> Self {
        self.alpha0 = a;
        self
    }
    pub fn with_max_iters(mut self, k: usize) -> Self {
        self.max_iters = k;
        self
    }
    pub fn without_diagnostics(mut self) -> Self {
        self.diagnostics = false;
        self
    }

    pub fn tolerance_for(&self, margin: &Margin) -> f64 {
        self.tol
            .unwrap_or_else(|| 1e-8 * margin.r().iter().map(|v| v.abs()).sum::<f64>().max(1.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub potentials: Potentials,
    pub table: TypicalTable,
    pub report: SinkhornReport,
}

/// Distinct values of a vector with multiplicities and a back-map.
#[derive(Debug, Clone)]
pub(crate) struct Groups {
    pub values: Vec<f64>,
    pub counts: Vec<f64>,
    /// `index[i]` is the group of element `i`.
    pub index: Vec<usize>,
    /// First element of each group.
    pub reps: Vec<usize>,
}

impl Groups {
    pub fn of(v: &[f64]) -> Self {
        Self::by_key(v.len(), |i| v[i].to_bits(), |i| v[i])
    }

    pub fn by_key<K: Ord + Copy>(len: usize, key: impl Fn(usize) -> K, value: impl Fn(usize) -> f64) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.sort_by_key(|&i| (key(i), i));
        let mut g = Groups {
            values: Vec::new(),
            counts: Vec::new(),
            index: vec![0; len],
            reps: Vec::new(),
        };
        let mut prev: Option<K> = None;
        for &i in &order {
            let k = key(i);
            if prev != Some(k) {
                g.values.push(value(i));
                g.counts.push(0.0);
                g.reps.push(i);
                prev = Some(k);
            }
            let gi = g.values.len() - 1;
            g.counts[gi] += 1.0;
            g.index[i] = gi;
        }
        g
    }
}

/// Grouped evaluation of the objective and margins at `(α, β)`.
#[derive(Debug, Clone)]
pub(crate) struct Evaluation {
    pub dual: f64,
    pub row_sums: Vec<f64>,
    pub col_sums: Vec<f64>,
    pub residual: f64,
    pub tilt_min: f64,
    pub tilt_max: f64,
}

pub(crate) fn evaluate<M: ExponentialFamily + ?Sized>(
    measure: &M,
    margin: &Margin,
    alpha: &[f64],
    beta: &[f64],
) -> Evaluation {
    let ga = Groups::of(alpha);
    let gb = Groups::of(beta);
    let (ka, kb) = (ga.values.len(), gb.values.len());
    let cells: Vec<(f64, f64)> = (0..ka * kb)
        .into_par_iter()
        .with_min_len(256)
        .map(|idx| {
            let t = ga.values[idx / kb] + gb.values[idx % kb];
            (measure.psi(t), measure.psi_prime(t))
        })
        .collect();
    let mut rsum = vec![0.0; ka];
    let mut csum = vec![0.0; kb];
    let mut psi_total = 0.0;
    for a in 0..ka {
        for b in 0..kb {
            let (p, d) = cells[a * kb + b];
            psi_total += ga.counts[a] * gb.counts[b] * p;
            rsum[a] += gb.counts[b] * d;
            csum[b] += ga.counts[a] * d;
        }
    }
    let row_sums: Vec<f64> = (0..alpha.len()).map(|i| rsum[ga.index[i]]).collect();
    let col_sums: Vec<f64> = (0..beta.len()).map(|j| csum[gb.index[j]]).collect();
    let residual = row_sums.iter().zip(margin.r()).map(|(a, b)| (a - b).abs()).sum::<f64>()
        + col_sums.iter().zip(margin.c()).map(|(a, b)| (a - b).abs()).sum::<f64>();
    let lin = margin.r().iter().zip(alpha).map(|(r, a)| r * a).sum::<f64>()
        + margin.c().iter().zip(beta).map(|(c, b)| c * b).sum::<f64>();
    let (amin, amax) = min_max(alpha);
    let (bmin, bmax) = min_max(beta);
    Evaluation {
        dual: lin - psi_total,
        row_sums,
        col_sums,
        residual,
        tilt_min: amin + bmin,
        tilt_max: amax + bmax,
    }
}

/// `g(α, β) = ⟨r, α⟩ + ⟨c, β⟩ − Σᵢⱼ ψ(α(i) + β(j))`.
pub fn dual_objective<M: ExponentialFamily + ?Sized>(measure: &M, margin: &Margin, p: &Potentials) -> Result<f64> {
    if p.alpha.len() != margin.m() || p.beta.len() != margin.n() {
        return Err(Error::DimensionMismatch(format!(
            "potentials {}+{} vs margin {}x{}",
            p.alpha.len(),
            p.beta.len(),
            margin.m(),
            margin.n()
        )));
    }
    p.check_domain(measure)?;
    Ok(evaluate(measure, margin, &p.alpha, &p.beta).dual)
}

/// Solves `Σ_g w_g ψ'(x_g + t) = target` for `t`, where `(x_g, w_g)` are the
/// fixed potentials with multiplicities. Returns `None` on boundary escape.
fn coordinate_root<M: ExponentialFamily + ?Sized>(
    measure: &M,
    fixed: &[f64],
    weights: &[f64],
    target: f64,
    warm: f64,
    tol: f64,
) -> Option<f64> {
    let (lo, hi) = measure.theta_domain();
    let (fmin, fmax) = min_max(fixed);
    let (tlo, thi) = (lo - fmin, hi - fmax);
    if !(tlo < thi) {
        return None;
    }
    let f = |t: f64| {
        let mut v = -target;
        let mut d = 0.0;
        for (x, w) in fixed.iter().zip(weights) {
            v += w * measure.psi_prime(x + t);
            d += w * measure.psi_double_prime(x + t);
        }
        (v, d)
    };
    let cfg = RootConfig {
        max_expansions: 200,
        max_bisections: 60,
        newton_polish: 5,
    };
    match solve_increasing(f, warm, tlo, thi, tol * target.abs().max(1.0), cfg) {
        Ok(t) => Some(t),
        Err(RootFailure::Escape { .. }) | Err(RootFailure::NotFinite(_)) => None,
    }
}

/// The unique `β` with `Σᵢ ψ'(α(i) + β) = target` (a column update; the row
/// update is the same map with the roles of `α` and `β` exchanged).
pub fn coordinate_update<M: ExponentialFamily + ?Sized>(
    measure: &M,
    fixed: &[f64],
    target: f64,
    tol: f64,
) -> Result<f64> {
    let g = Groups::of(fixed);
    let warm = measure
        .phi(target / fixed.len() as f64)
        .map(|t| t - fixed.iter().sum::<f64>() / fixed.len() as f64)
        .unwrap_or(0.0);
    coordinate_root(measure, &g.values, &g.counts, target, warm, tol).ok_or(Error::BoundaryEscape {
        axis: "coordinate",
        index: 0,
        target,
    })
}

struct Engine<'a, M: ?Sized> {
    measure: &'a M,
    margin: &'a Margin,
    root_tol: f64,
    rows: Groups,
    cols: Groups,
}

impl<'a, M: ExponentialFamily + ?Sized> Engine<'a, M> {
    fn new(measure: &'a M, margin: &'a Margin, root_tol: f64) -> Self {
        Self {
            measure,
            margin,
            root_tol,
            rows: Groups::of(margin.r()),
            cols: Groups::of(margin.c()),
        }
    }

    /// Updates `out` so that each target is met given the `fixed` side.
    fn update(&self, fixed: &[f64], targets: &Groups, out: &mut [f64], axis: &'static str) -> Result<()> {
        let g = Groups::of(fixed);
        let work = targets.values.len() * g.values.len();
        let solve_one = |k: usize| -> Result<f64> {
            let rep = targets.reps[k];
            coordinate_root(self.measure, &g.values, &g.counts, targets.values[k], out[rep], self.root_tol).ok_or(
                Error::BoundaryEscape {
                    axis,
                    index: rep,
                    target: targets.values[k],
                },
            )
        };
        let solved: Vec<f64> = if targets.values.len() > 1 && work >= 4096 {
            (0..targets.values.len()).into_par_iter().map(solve_one).collect::<Result<_>>()?
        } else {
            (0..targets.values.len()).map(solve_one).collect::<Result<_>>()?
        };
        for (i, o) in out.iter_mut().enumerate() {
            *o = solved[targets.index[i]];
        }
        Ok(())
    }

    /// One full sweep: columns, then rows, then `Σα = 0`.
    fn sweep(&self, alpha: &mut [f64], beta: &mut [f64]) -> Result<()> {
        self.update(alpha, &self.cols, beta, "column")?;
        self.update(beta, &self.rows, alpha, "row")?;
        let s = alpha.iter().sum::<f64>() / alpha.len() as f64;
        alpha.iter_mut().for_each(|a| *a -= s);
        beta.iter_mut().for_each(|b| *b += s);
        Ok(())
    }

    /// Warm start for the first column sweep.
    fn initial_beta(&self, alpha: &[f64]) -> Vec<f64> {
        let mean_a = alpha.iter().sum::<f64>() / alpha.len() as f64;
        let m = self.margin.m() as f64;
        self.margin
            .c()
            .iter()
            .map(|&c| self.measure.phi(c / m).map(|t| t - mean_a).unwrap_or(0.0))
            .collect()
    }
}

fn initial_alpha<M: ExponentialFamily + ?Sized>(measure: &M, m: usize, a0: &Alpha0) -> Result<Vec<f64>> {
    match a0 {
        Alpha0::Zero => Ok(vec![0.0; m]),
        Alpha0::Given(v) => {
            if v.len() != m {
                return Err(Error::DimensionMismatch(format!("alpha0 has {} entries, margin has {m} rows", v.len())));
            }
            Ok(v.clone())
        }
        Alpha0::Random(seed) => {
            let (lo, hi) = measure.theta_domain();
            let amp = if lo.is_finite() && hi.is_finite() { 0.2 * (hi - lo) } else { 1.0 };
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            Ok((0..m).map(|_| amp * (2.0 * rng.random::<f64>() - 1.0)).collect())
        }
    }
}

/// Runs the generalized Sinkhorn iteration.
pub fn solve<M: ExponentialFamily + ?Sized>(measure: &M, margin: &Margin, cfg: &SolverConfig) -> Result<Solution> {
    if let Feasibility::Infeasible(reason) = margin.validate(measure) {
        return Err(Error::Infeasible(reason));
    }
    let (m, n) = (margin.m(), margin.n());
    let tol = cfg.tolerance_for(margin);
    let engine = Engine::new(measure, margin, cfg.root_tol);

    let mut alpha = initial_alpha(measure, m, &cfg.alpha0)?;
    let alpha_start = alpha.clone();
    let mut beta = engine.initial_beta(&alpha);

    let mut dual_values = Vec::new();
    let mut residuals = Vec::new();
    let mut history: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut stored = 0usize;
    let mut converged = false;
    let mut last_eval = None;

    for _ in 0..cfg.max_iters {
        engine.sweep(&mut alpha, &mut beta)?;
        let ev = evaluate(measure, margin, &alpha, &beta);
        dual_values.push(ev.dual);
        residuals.push(ev.residual);
        if cfg.diagnostics && stored + m + n <= cfg.history_limit {
            history.push((alpha.clone(), beta.clone()));
            stored += m + n;
        }
        let done = ev.residual <= tol;
        last_eval = Some(ev);
        if done {
            converged = true;
            break;
        }
    }
    let ev = last_eval.unwrap_or_else(|| evaluate(measure, margin, &alpha, &beta));
    let potentials = Potentials {
        alpha,
        beta,
        standardized: true,
    };
    let table = TypicalTable::from_potentials(measure, margin, &potentials);
    let delta = realized_delta(measure, table.z.iter().copied());

    let approaching_boundary = match TamenessBand::new(measure, DELTA_MIN).map(|b| b.theta_band(measure)) {
        Some(Ok((lo, hi))) => ev.tilt_min < lo || ev.tilt_max > hi,
        _ => true,
    };
    let contraction_bound = contraction_bound(measure, delta / 2.0);

    let mut report = SinkhornReport {
        iterations: dual_values.len(),
        potential_gaps: potential_gaps(&history, &potentials),
        dual_values,
        residuals,
        dual_gaps: Vec::new(),
        converged,
        tolerance: tol,
        rate_estimate: None,
        approaching_boundary,
        tilt_min: ev.tilt_min,
        tilt_max: ev.tilt_max,
        realized_delta: delta,
        contraction_bound,
        start_condition: None,
    };

    if !converged {
        return Err(Error::MaxItersExceeded {
            iterations: report.iterations,
            residual: ev.residual,
            report: Box::new(report),
        });
    }

    if cfg.diagnostics {
        let reference = polish(&engine, &potentials, cfg.polish_iters)?;
        report.dual_gaps = history
            .iter()
            .map(|(a, b)| bregman_gap(measure, margin, a, b, &reference))
            .collect();
        report.rate_estimate = fit_gaps(&report.dual_gaps, &history, &reference)
            .ok()
            .map(|mut r| {
                r.theoretical_bound = contraction_bound;
                r.within_bound = contraction_bound.map(|b| r.ratio <= b + 1e-3);
                r
            });
        report.start_condition = start_condition(measure, &alpha_start, &reference, delta / 2.0);
    }

    Ok(Solution {
        potentials,
        table,
        report,
    })
}

/// `1 − σ₁⁴/σ₂⁴` with `σ₁², σ₂²` the inf/sup of `ψ''` on `[φ(A_ε), φ(B_ε)]`.
pub fn contraction_bound<M: ExponentialFamily + ?Sized>(measure: &M, eps: f64) -> Option<f64> {
    let band = TamenessBand::new(measure, eps)?;
    let (lo, hi) = band.theta_band(measure).ok()?;
    let (s1, s2) = psi_dd_range(measure, lo, hi, 2001);
    Some(1.0 - (s1 / s2).powi(2))
}

/// Continues sweeping until the residual stops improving.
fn polish<M: ExponentialFamily + ?Sized>(engine: &Engine<'_, M>, p: &Potentials, iters: usize) -> Result<Potentials> {
    let mut alpha = p.alpha.clone();
    let mut beta = p.beta.clone();
    let mut best = evaluate(engine.measure, engine.margin, &alpha, &beta).residual;
    let mut best_pair = (alpha.clone(), beta.clone());
    let mut stale = 0;
    for _ in 0..iters {
        engine.sweep(&mut alpha, &mut beta)?;
        let res = evaluate(engine.measure, engine.margin, &alpha, &beta).residual;
        if res < best {
            if res > 0.5 * best {
                stale += 1;
            } else {
                stale = 0;
            }
            best = res;
            best_pair = (alpha.clone(), beta.clone());
        } else {
            stale += 1;
        }
        if stale >= 5 || best == 0.0 {
            break;
        }
    }
    Ok(Potentials {
        alpha: best_pair.0,
        beta: best_pair.1,
        standardized: true,
    })
}

/// `‖Δα ⊕ Δβ‖_F` via `n Σda² + m Σdb² + 2 Σda Σdb`.
fn potential_gaps(history: &[(Vec<f64>, Vec<f64>)], last: &Potentials) -> Vec<f64> {
    history
        .iter()
        .map(|(a, b)| oplus_distance(a, b, &last.alpha, &last.beta))
        .collect()
}

/// Frobenius distance between `a ⊕ b` and `a' ⊕ b'`.
pub fn oplus_distance(a: &[f64], b: &[f64], a2: &[f64], b2: &[f64]) -> f64 {
    let (m, n) = (a.len() as f64, b.len() as f64);
    let da: Vec<f64> = a.iter().zip(a2).map(|(x, y)| x - y).collect();
    let db: Vec<f64> = b.iter().zip(b2).map(|(x, y)| x - y).collect();
    let sa: f64 = da.iter().sum();
    let sb: f64 = db.iter().sum();
    let qa: f64 = da.iter().map(|v| v * v).sum();
    let qb: f64 = db.iter().map(|v| v * v).sum();
    (n * qa + m * qb + 2.0 * sa * sb).max(0.0).sqrt()
}

const GL5: [(f64, f64); 5] = [
    (0.046_910_077_030_668, 0.118_463_442_528_095),
    (0.230_765_344_947_158, 0.239_314_335_249_683),
    (0.5, 0.284_444_444_444_444),
    (0.769_234_655_052_842, 0.239_314_335_249_683),
    (0.953_089_922_969_332, 0.118_463_442_528_095),
];

/// `ψ(θ + d) − ψ(θ) − ψ'(θ) d`, accurate for small `d`.
pub fn bregman<M: ExponentialFamily + ?Sized>(measure: &M, theta: f64, d: f64) -> f64 {
    if d == 0.0 {
        return 0.0;
    }
    if d.abs() <= 1e-3 {
        let p0 = measure.psi_prime(theta);
        d * GL5
            .iter()
            .map(|&(x, w)| w * (measure.psi_prime(theta + x * d) - p0))
            .sum::<f64>()
    } else {
        measure.psi(theta + d) - measure.psi(theta) - measure.psi_prime(theta) * d
    }
}

/// `g(α*, β*) − g(α, β)` written as a sum of Bregman divergences plus the
/// (tiny) residual correction of the reference point.
fn bregman_gap<M: ExponentialFamily + ?Sized>(
    measure: &M,
    margin: &Margin,
    alpha: &[f64],
    beta: &[f64],
    reference: &Potentials,
) -> f64 {
    let (ra, rb) = (&reference.alpha, &reference.beta);
    let da: Vec<f64> = alpha.iter().zip(ra).map(|(x, y)| x - y).collect();
    let db: Vec<f64> = beta.iter().zip(rb).map(|(x, y)| x - y).collect();
    let gr = Groups::by_key(alpha.len(), |i| (ra[i].to_bits(), da[i].to_bits()), |i| ra[i]);
    let gc = Groups::by_key(beta.len(), |j| (rb[j].to_bits(), db[j].to_bits()), |j| rb[j]);
    let ref_eval = evaluate(measure, margin, ra, rb);
    let mut total = 0.0;
    for (a, &ia) in gr.reps.iter().enumerate() {
        for (b, &jb) in gc.reps.iter().enumerate() {
            total += gr.counts[a] * gc.counts[b] * bregman(measure, ra[ia] + rb[jb], da[ia] + db[jb]);
        }
    }
    let corr = da.iter().zip(margin.r()).zip(&ref_eval.row_sums).map(|((d, r), s)| d * (r - s)).sum::<f64>()
        + db.iter().zip(margin.c()).zip(&ref_eval.col_sums).map(|((d, c), s)| d * (c - s)).sum::<f64>();
    total - corr
}

fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { (sxy * sxy) / (sxx * syy) } else { 1.0 };
    (slope, r2)
}

fn fit_points(points: &[(usize, f64)]) -> Result<RateEstimate> {
    if points.len() < 3 {
        return Err(Error::TooFewIterations(points.len()));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0 as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let (slope, r2) = linear_fit(&xs, &ys);
    Ok(RateEstimate {
        ratio: slope.exp(),
        r_squared: r2,
        points: points.iter().map(|p| p.0).collect(),
        theoretical_bound: None,
        within_bound: None,
    })
}

/// Fits the last ten iterations whose potentials are still resolvably far
/// from the reference.
fn fit_gaps(gaps: &[f64], history: &[(Vec<f64>, Vec<f64>)], reference: &Potentials) -> Result<RateEstimate> {
    let scale = reference
        .alpha
        .iter()
        .chain(&reference.beta)
        .fold(1.0f64, |s, v| s.max(v.abs()));
    let usable: Vec<(usize, f64)> = gaps
        .iter()
        .zip(history)
        .enumerate()
        .filter(|(_, (g, (a, b)))| {
            let dist = linf_shift_distance(a, b, &reference.alpha, &reference.beta);
            **g > 0.0 && dist > 1e-9 * scale
        })
        .map(|(k, (g, _))| (k + 1, *g))
        .collect();
    let tail = &usable[usable.len().saturating_sub(10)..];
    fit_points(tail)
}

/// Fits `log(reference_dual − g_k)` over the last ten positive gaps.
pub fn rate_diagnostics(report: &SinkhornReport, reference_dual: f64) -> Result<RateEstimate> {
    let pts: Vec<(usize, f64)> = report
        .dual_values
        .iter()
        .enumerate()
        .map(|(k, g)| (k + 1, reference_dual - g))
        .filter(|(_, d)| *d > 0.0)
        .collect();
    let tail = &pts[pts.len().saturating_sub(10)..];
    let mut est = fit_points(tail)?;
    est.theoretical_bound = report.contraction_bound;
    est.within_bound = report.contraction_bound.map(|b| est.ratio <= b + 1e-3);
    Ok(est)
}

fn start_condition<M: ExponentialFamily + ?Sized>(
    measure: &M,
    alpha0: &[f64],
    reference: &Potentials,
    eps: f64,
) -> Option<StartCondition> {
    let band = TamenessBand::new(measure, eps)?;
    let (lo, hi) = band.theta_band(measure).ok()?;
    let d: Vec<f64> = alpha0.iter().zip(&reference.alpha).map(|(x, y)| x - y).collect();
    let (dmin, dmax) = min_max(&d);
    let l = 0.5 * (dmax - dmin);
    let (tmin, tmax) = reference.tilt_range();
    let lower_slack = tmin - (lo + 2.0 * l);
    let upper_slack = (hi - 2.0 * l) - tmax;
    Some(StartCondition {
        linf_start_distance: l,
        lower_slack,
        upper_slack,
        satisfied: lower_slack >= 0.0 && upper_slack >= 0.0,
    })
}

/// Shift-invariant sup distance between `(a, b)` and `(â, b̂)`:
/// `min_s max(‖a − â − s‖∞, ‖b − b̂ + s‖∞)`.
pub fn linf_shift_distance(a: &[f64], b: &[f64], ah: &[f64], bh: &[f64]) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (x, y) in a.iter().zip(ah) {
        let u = x - y;
        lo = lo.min(u);
        hi = hi.max(u);
    }
    for (x, y) in b.iter().zip(bh) {
        let v = -(x - y);
        lo = lo.min(v);
        hi = hi.max(v);
    }
    0.5 * (hi - lo)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinfVerdict {
    pub monotone: bool,
    /// Per trial, the distance before the first sweep and after each sweep.
    pub distances: Vec<Vec<f64>>,
}

/// Replays the iteration from random starts and checks that the shift-
/// invariant sup distance to the reference MLE never increases.
pub fn linf_monotonicity_check<M: ExponentialFamily + ?Sized>(
    measure: &M,
    margin: &Margin,
    reference: &Potentials,
    starts: &[Vec<f64>],
    sweeps: usize,
) -> Result<LinfVerdict> {
    let engine = Engine::new(measure, margin, 1e-14);
    let mut monotone = true;
    let mut distances = Vec::with_capacity(starts.len());
    for a0 in starts {
        if a0.len() != margin.m() {
            return Err(Error::DimensionMismatch("start vector length differs from m".into()));
        }
        let mut alpha = a0.clone();
        let mut beta = engine.initial_beta(&alpha);
        // Before any sweep only α is defined.
        let mut trail = vec![{
            let (lo, hi) = min_max(&alpha.iter().zip(&reference.alpha).map(|(x, y)| x - y).collect::<Vec<_>>());
            0.5 * (hi - lo)
        }];
        for _ in 0..sweeps {
            engine.sweep(&mut alpha, &mut beta)?;
            let d = linf_shift_distance(&alpha, &beta, &reference.alpha, &reference.beta);
            let prev = *trail.last().unwrap();
            if d > prev + 1e-9 * (1.0 + trail[0]) {
                monotone = false;
            }
            trail.push(d);
            if d < 1e-12 {
                break;
            }
        }
        distances.push(trail);
    }
    Ok(LinfVerdict { monotone, distances })
}

/// Random starting vectors with i.i.d. uniform entries in `[-amp, amp]`.
pub fn random_starts(m: usize, trials: usize, amp: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials)
        .map(|_| (0..m).map(|_| amp * (2.0 * rng.random::<f64>() - 1.0)).collect())
        .collect()
}
