//! Singular value distributions of centred tables and the Dyson equation
//! that describes their limit.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::ExponentialFamily;
use crate::sinkhorn::Potentials;

/// How the centred matrix is rescaled before taking singular values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Normalization {
    /// Divide by `√((m+n)s*/2)`.
    HalfSum,
    /// Divide by `√(s*·n)` (`n` = number of columns).
    Square,
    /// Divide by `√v` for the given `v`.
    Fixed(f64),
}

impl Normalization {
    /// The variance scale `v` such that the matrix is divided by `√v`.
    pub fn factor(&self, m: usize, n: usize, s_star: f64) -> f64 {
        match *self {
            Normalization::HalfSum => (m + n) as f64 * s_star / 2.0,
            Normalization::Square => n as f64 * s_star,
            Normalization::Fixed(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub densities: Vec<f64>,
}

impl Histogram {
    /// Density histogram of `values` with `bins` equal bins on `[lo, hi]`.
    /// Values outside the range are dropped from the counts but still count
    /// towards the normalisation.
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins];
        for &v in values {
            if v >= lo && v <= hi {
                let b = (((v - lo) / width) as usize).min(bins - 1);
                counts[b] += 1;
            }
        }
        let total = values.len().max(1) as f64;
        Self {
            edges: (0..=bins).map(|k| lo + width * k as f64).collect(),
            densities: counts.iter().map(|&c| c as f64 / (total * width)).collect(),
        }
    }
}

/// Singular values of `(Y − Z)/√v`, sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsdResult {
    pub m: usize,
    pub n: usize,
    pub singular_values: Vec<f64>,
    pub s_star: f64,
    pub normalization: Normalization,
    /// The `v` that was used.
    pub factor: f64,
    pub histogram: Histogram,
}

impl EsdResult {
    pub fn second_moment(&self) -> f64 {
        self.singular_values.iter().map(|s| s * s).sum::<f64>() / self.singular_values.len().max(1) as f64
    }
}

/// Number of histogram bins in [`esd`] results.
pub const ESD_BINS: usize = 50;

/// Empirical singular value distribution of the centred, rescaled matrix.
pub fn esd(
    matrix: &[f64],
    center: &[f64],
    m: usize,
    n: usize,
    s_star: f64,
    normalization: Normalization,
) -> Result<EsdResult> {
    if matrix.len() != m * n || center.len() != m * n {
        return Err(Error::DimensionMismatch(format!(
            "expected {} entries, got {} and {}",
            m * n,
            matrix.len(),
            center.len()
        )));
    }
    if !(s_star > 0.0 && s_star.is_finite()) {
        return Err(Error::Domain(format!("s* must be positive, got {s_star}")));
    }
    let factor = normalization.factor(m, n, s_star);
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::Domain(format!("normalisation factor must be positive, got {factor}")));
    }
    let scale = factor.sqrt().recip();
    let a = DMatrix::from_fn(m, n, |i, j| (matrix[i * n + j] - center[i * n + j]) * scale);
    let mut sv: Vec<f64> = a.singular_values().iter().map(|s| s.max(0.0)).collect();
    sv.sort_by(f64::total_cmp);
    let top = sv.last().copied().unwrap_or(0.0).max(2.5);
    let histogram = Histogram::new(&sv, 0.0, top, ESD_BINS);
    Ok(EsdResult {
        m,
        n,
        singular_values: sv,
        s_star,
        normalization,
        factor,
        histogram,
    })
}

/// Variance profile `ψ''(α(i) + β(j))`, row-major.
pub fn variance_profile<M: ExponentialFamily + ?Sized>(m: &M, p: &Potentials) -> Vec<f64> {
    p.alpha
        .iter()
        .flat_map(|&a| p.beta.iter().map(move |&b| m.psi_double_prime(a + b)))
        .collect()
}

/// `s* = sup ψ''(α ⊕ β)`.
pub fn s_star<M: ExponentialFamily + ?Sized>(m: &M, p: &Potentials) -> f64 {
    variance_profile(m, p).into_iter().fold(0.0, f64::max)
}

/// Quarter-circle CDF `(x√(4−x²) + 4 arcsin(x/2)) / (2π)` on `[0, 2]`.
pub fn quarter_circle_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 2.0 {
        1.0
    } else {
        (x * (4.0 - x * x).sqrt() + 4.0 * (x / 2.0).asin()) / (2.0 * PI)
    }
}

pub fn quarter_circle_density(x: f64) -> f64 {
    if x > 0.0 && x < 2.0 {
        (4.0 - x * x).sqrt() / PI
    } else {
        0.0
    }
}

/// Kolmogorov–Smirnov distance between the empirical law of `sorted`
/// (ascending) and a continuous-or-atomic CDF.
pub fn ks_statistic(sorted: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let k = sorted.len() as f64;
    let mut d = 0.0f64;
    let mut i = 0;
    while i < sorted.len() {
        // Treat ties as a single jump.
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let f = cdf(sorted[i]);
        let before = i as f64 / k;
        let after = (j + 1) as f64 / k;
        // Just below the jump the CDF may equal its left limit; for atomic
        // targets, `cdf` already includes the atom, so compare `before`
        // with the left limit approximated from below.
        let f_left = cdf(sorted[i] - 1e-12 * (1.0 + sorted[i].abs()));
        d = d.max((f_left - before).abs()).max((after - f).abs());
        i = j + 1;
    }
    d
}

/// KS distance from the quarter-circle law; square matrices only.
pub fn quarter_circle_distance(esd: &EsdResult) -> Result<f64> {
    if esd.m != esd.n {
        return Err(Error::NonSquare(esd.m, esd.n));
    }
    if esd.singular_values.is_empty() {
        return Err(Error::EmptySpectrum);
    }
    Ok(ks_statistic(&esd.singular_values, quarter_circle_cdf))
}

/// Marchenko–Pastur CDF with ratio `κ` and unit variance, including the
/// atom `(1 − 1/κ)` at zero when `κ > 1`.
pub fn mp_cdf(x: f64, kappa: f64) -> f64 {
    if x < 0.0 {
        return 0.0;
    }
    let atom = (1.0 - 1.0 / kappa).max(0.0);
    let (a, b) = ((1.0 - kappa.sqrt()).powi(2), (1.0 + kappa.sqrt()).powi(2));
    if x <= a {
        return atom;
    }
    if x >= b {
        return 1.0;
    }
    // x(φ) = a + (b−a)(1−cos φ)/2 turns √((b−x)(x−a)) dx into a smooth
    // integrand on [0, π].
    let half = 0.5 * (b - a);
    let g = |phi: f64| {
        let xs = a + half * (1.0 - phi.cos());
        if xs <= 0.0 {
            // a = 0: sin²φ/(1 − cos φ) → 1 + cos φ.
            return half * (1.0 + phi.cos()) / (2.0 * PI * kappa);
        }
        let s = phi.sin();
        half * half * s * s / (2.0 * PI * kappa * xs)
    };
    let end = (1.0 - (x - a) / half).clamp(-1.0, 1.0).acos();
    atom + simpson(g, 0.0, end, 512)
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let n = panels + panels % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + h * k as f64);
    }
    s * h / 3.0
}

/// KS distance between eigenvalues of `(1/n)(X−Z)(X−Z)ᵀ` and MP(κ).
pub fn mp_distance(eigs: &[f64], kappa: f64) -> Result<f64> {
    if eigs.is_empty() {
        return Err(Error::EmptySpectrum);
    }
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::Domain(format!("aspect ratio must be positive, got {kappa}")));
    }
    let mut v = Vec::with_capacity(eigs.len());
    for &e in eigs {
        if e < -1e-8 {
            return Err(Error::NegativeEigenvalue(e));
        }
        v.push(e.max(0.0));
    }
    v.sort_by(f64::total_cmp);
    Ok(ks_statistic(&v, |x| mp_cdf(x, kappa)))
}

/// Settings of the damped Dyson iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DysonConfig {
    pub tol: f64,
    pub max_iters: usize,
    /// Initial damping `γ`; halved whenever the residual grows.
    pub damping: f64,
    pub min_damping: f64,
    pub start: DysonStart,
}

/// Initial guess of the Dyson iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DysonStart {
    /// Exact solution for the constant profile with the same mean row and
    /// column sums.
    MeanField,
    /// `τ = −1/z`, the large-`|z|` asymptote.
    Asymptotic,
}

impl Default for DysonConfig {
    fn default() -> Self {
        Self {
            tol: 1e-11,
            max_iters: 200_000,
            damping: 0.5,
            min_damping: 1.0 / 1024.0,
            start: DysonStart::MeanField,
        }
    }
}

/// Smallest admissible `Im z` for [`dyson_solve`].
pub const MIN_IMAG: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DysonSolution {
    /// One value per row.
    pub tau: Vec<Complex64>,
    pub z: Complex64,
    pub residual: f64,
    pub iterations: usize,
    /// `Im⟨τ⟩ / π`.
    pub density_estimate: f64,
    /// Residual after every iteration.
    pub residual_history: Vec<f64>,
}

impl DysonSolution {
    pub fn mean_tau(&self) -> Complex64 {
        self.tau.iter().sum::<Complex64>() / self.tau.len() as f64
    }
}

/// Variance profile with identical rows and identical columns merged.
#[derive(Debug, Clone)]
struct Profile {
    /// Distinct-row representative for each row.
    row_of: Vec<usize>,
    row_count: Vec<f64>,
    col_count: Vec<f64>,
    /// `s[a][b]` on the compressed grid, already normalised.
    s: Vec<Vec<f64>>,
}

impl Profile {
    fn new(s: &[f64], m: usize, n: usize, normalization: f64) -> Result<Self> {
        if s.len() != m * n || m == 0 || n == 0 {
            return Err(Error::DimensionMismatch(format!("variance profile of length {} for {m}x{n}", s.len())));
        }
        if !(normalization > 0.0 && normalization.is_finite()) {
            return Err(Error::Domain(format!("normalisation must be positive, got {normalization}")));
        }
        if s.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::Domain("variance profile must be finite and non-negative".into()));
        }
        let key = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<u64>>();
        let group = |keys: Vec<Vec<u64>>| {
            let mut ids: BTreeMap<Vec<u64>, usize> = BTreeMap::new();
            let mut of = Vec::with_capacity(keys.len());
            let mut reps = Vec::new();
            for (k, kk) in keys.into_iter().enumerate() {
                let next = ids.len();
                let id = *ids.entry(kk).or_insert_with(|| {
                    reps.push(k);
                    next
                });
                of.push(id);
            }
            (of, reps)
        };
        let (row_of, row_reps) = group((0..m).map(|i| key(&s[i * n..(i + 1) * n])).collect());
        let (col_of, col_reps) = group((0..n).map(|j| key(&(0..m).map(|i| s[i * n + j]).collect::<Vec<_>>())).collect());
        let mut row_count = vec![0.0; row_reps.len()];
        row_of.iter().for_each(|&a| row_count[a] += 1.0);
        let mut col_count = vec![0.0; col_reps.len()];
        col_of.iter().for_each(|&b| col_count[b] += 1.0);
        let s = row_reps
            .iter()
            .map(|&i| col_reps.iter().map(|&j| s[i * n + j] / normalization).collect())
            .collect();
        Ok(Self {
            row_of,
            row_count,
            col_count,
            s,
        })
    }

    /// Row-form map `−1/τ_a = z − Σ_b n_b S_ab / (1 + Σ_a' m_a' S_a'b τ_a')`.
    fn wishart_map(&self, z: Complex64, tau: &[Complex64]) -> Vec<Complex64> {
        let col: Vec<Complex64> = (0..self.col_count.len())
            .map(|b| {
                let st: Complex64 = tau.iter().zip(&self.s).zip(&self.row_count).map(|((t, row), &ma)| *t * row[b] * ma).sum();
                (Complex64::new(1.0, 0.0) + st).inv()
            })
            .collect();
        self.s
            .iter()
            .map(|row| {
                let acc: Complex64 = row.iter().zip(&col).zip(&self.col_count).map(|((s, c), &nb)| *c * *s * nb).sum();
                -(z - acc).inv()
            })
            .collect()
    }

    /// Symmetrised map at `w`: `g₂ = −1/(w + Sᵀg₁)`, `g₁ ← −1/(w + S g₂)`.
    fn hermitian_map(&self, w: Complex64, g1: &[Complex64]) -> Vec<Complex64> {
        let g2: Vec<Complex64> = (0..self.col_count.len())
            .map(|b| {
                let st: Complex64 = g1.iter().zip(&self.s).zip(&self.row_count).map(|((g, row), &ma)| *g * row[b] * ma).sum();
                -(w + st).inv()
            })
            .collect();
        self.s
            .iter()
            .map(|row| {
                let acc: Complex64 = row.iter().zip(&g2).zip(&self.col_count).map(|((s, g), &nb)| *g * *s * nb).sum();
                -(w + acc).inv()
            })
            .collect()
    }

    /// Mean row sum `a` and mean column sum `b` of the weighted profile.
    fn mean_sums(&self) -> (f64, f64) {
        let m: f64 = self.row_count.iter().sum();
        let n: f64 = self.col_count.iter().sum();
        let total: f64 = self
            .s
            .iter()
            .zip(&self.row_count)
            .map(|(row, &ma)| ma * row.iter().zip(&self.col_count).map(|(s, &nb)| s * nb).sum::<f64>())
            .sum();
        (total / m, total / n)
    }

    /// Root with `Im τ > 0` of `b z τ² + (z + b − a) τ + 1 = 0`, the row
    /// equation for a constant profile with row sum `a` and column sum `b`.
    fn mean_field(&self, z: Complex64) -> Complex64 {
        let (a, b) = self.mean_sums();
        if b == 0.0 {
            return -z.inv();
        }
        let (qa, qb) = (z * b, z + b - a);
        let disc = (qb * qb - qa * 4.0).sqrt();
        let r1 = (-qb + disc) / (qa * 2.0);
        let r2 = (-qb - disc) / (qa * 2.0);
        match (r1.im > 0.0, r2.im > 0.0) {
            (true, false) => r1,
            (false, true) => r2,
            _ => -z.inv(),
        }
    }

    fn start(&self, z: Complex64, start: DysonStart) -> Vec<Complex64> {
        let t = match start {
            DysonStart::MeanField => self.mean_field(z),
            DysonStart::Asymptotic => -z.inv(),
        };
        vec![t; self.row_count.len()]
    }

    fn expand(&self, v: &[Complex64]) -> Vec<Complex64> {
        self.row_of.iter().map(|&a| v[a]).collect()
    }

    fn mean(&self, v: &[Complex64]) -> Complex64 {
        let m: f64 = self.row_count.iter().sum();
        v.iter().zip(&self.row_count).map(|(x, &c)| *x * c).sum::<Complex64>() / m
    }
}

fn sup_dist(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

/// Iterations during which a residual-increasing step is retried with a
/// smaller step; afterwards the step is fixed at `damping`.
const BURN_IN: usize = 20;

/// Damped fixed-point iteration `x ← (1−γ)x + γΦ(x)` with `Im x ≥ 0`
/// enforced after each step. During burn-in a step that would increase the
/// residual is retried with `γ` halved (down to `min_damping`); `γ` recovers
/// by 25% per accepted step. After burn-in `γ = damping`.
fn damped_fixed_point(
    map: impl Fn(&[Complex64]) -> Vec<Complex64>,
    mut x: Vec<Complex64>,
    cfg: &DysonConfig,
) -> (Vec<Complex64>, f64, usize, Vec<f64>) {
    let mut gamma = cfg.damping;
    let mut history = Vec::new();
    let mut fx = map(&x);
    let mut res = sup_dist(&fx, &x);
    let mut k = 0;
    while k < cfg.max_iters && res > cfg.tol {
        k += 1;
        if k > BURN_IN {
            gamma = cfg.damping;
        }
        let cand: Vec<Complex64> = x
            .iter()
            .zip(&fx)
            .map(|(xi, fi)| {
                let mut v = *xi * (1.0 - gamma) + *fi * gamma;
                if v.im < 0.0 {
                    v.im = 0.0;
                }
                v
            })
            .collect();
        let fc = map(&cand);
        let rc = sup_dist(&fc, &cand);
        if k <= BURN_IN && rc > res && gamma > cfg.min_damping {
            gamma = (gamma * 0.5).max(cfg.min_damping);
            continue;
        }
        x = cand;
        fx = fc;
        res = rc;
        history.push(res);
        gamma = (gamma * 1.25).min(cfg.damping);
    }
    (x, res, k, history)
}

/// Solves the row form of the Dyson equation for the variance profile
/// `S / normalization` at spectral parameter `z`.
///
/// `⟨τ⟩` is the Stieltjes transform of the eigenvalue distribution of
/// `ỸỸᵀ` (eigenvalue coordinate); see [`dyson_density`] for singular values.
pub fn dyson_solve(
    s: &[f64],
    m: usize,
    n: usize,
    normalization: f64,
    z: Complex64,
    cfg: &DysonConfig,
) -> Result<DysonSolution> {
    if !(z.im >= MIN_IMAG) {
        return Err(Error::ImagTooSmall(z.im));
    }
    let prof = Profile::new(s, m, n, normalization)?;
    let init = prof.start(z, cfg.start);
    let (tau, residual, iterations, residual_history) = damped_fixed_point(|t| prof.wishart_map(z, t), init, cfg);
    if !(residual <= cfg.tol) {
        return Err(Error::DysonNonConvergence { iterations, residual });
    }
    let mean = prof.mean(&tau);
    Ok(DysonSolution {
        tau: prof.expand(&tau),
        z,
        residual,
        iterations,
        density_estimate: mean.im / PI,
        residual_history,
    })
}

/// Density curve in singular-value coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityCurve {
    /// Singular values `x`.
    pub grid: Vec<f64>,
    /// Estimated density of the singular value distribution at `x`.
    pub density: Vec<f64>,
    /// Same curve transported to eigenvalues `λ = x²`: `q(x)/(2x)`.
    pub eigen_density: Vec<f64>,
    pub eta: f64,
    /// Mass of the smoothed law outside the grid: below the first point by
    /// constant extrapolation to zero, above the last by extra solves out to
    /// `1000η` and the `−1/w` asymptote beyond.
    pub tail_mass: f64,
    /// How the curve was obtained.
    pub coordinates: String,
}

impl DensityCurve {
    /// Trapezoid integral of the singular-value density over the grid.
    pub fn mass(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, q)| 0.5 * (x[1] - x[0]) * (q[0] + q[1]))
            .sum()
    }

    /// Grid mass plus [`Self::tail_mass`]; equals one up to discretisation.
    pub fn total_mass(&self) -> f64 {
        self.mass() + self.tail_mass
    }

    /// `sup |q(x) − (1/π)√(4−x²)|` over the grid.
    pub fn quarter_circle_sup_distance(&self) -> f64 {
        self.grid
            .iter()
            .zip(&self.density)
            .map(|(&x, &q)| (q - quarter_circle_density(x)).abs())
            .fold(0.0, f64::max)
    }
}

pub const COORDINATES_NOTE: &str = "singular-value coordinate x; q(x) = (2/π)·Im⟨g(x+iη)⟩ where g = w·τ(w²) solves the symmetrised Dyson equation at w = x+iη (uniform smoothing width η in x); eigen_density = q(x)/(2x) is the density of λ = x²";

/// Limiting singular value density on `grid` with smoothing `eta`.
///
/// Rather than evaluating `τ` at `x² + iη` (whose smoothing width in `x`
/// shrinks like `η/2x` and blows up near zero), this solves the symmetrised
/// equation for `g = wτ(w²)` at `w = x + iη`, the Stieltjes transform of
/// the symmetrised singular value law, and reports `(2/π) Im⟨g⟩`.
pub fn dyson_density(
    s: &[f64],
    m: usize,
    n: usize,
    normalization: f64,
    grid: &[f64],
    eta: f64,
    cfg: &DysonConfig,
) -> Result<DensityCurve> {
    if !(0.01..=0.1).contains(&eta) {
        return Err(Error::Domain(format!("η must lie in [0.01, 0.1], got {eta}")));
    }
    if let Some(&x) = grid.iter().find(|&&x| !(x > 0.0 && x <= 2.5)) {
        return Err(Error::Domain(format!("grid point {x} outside (0, 2.5]")));
    }
    let prof = Profile::new(s, m, n, normalization)?;
    let eval = |xs: &[f64]| -> Result<Vec<f64>> {
        xs.par_iter()
            .map(|&x| {
                let w = Complex64::new(x, eta);
                // g = wτ(w²); the start is mapped the same way.
                let init: Vec<Complex64> = prof.start(w * w, cfg.start).into_iter().map(|t| t * w).collect();
                let (g, residual, iterations, _) = damped_fixed_point(|g| prof.hermitian_map(w, g), init, cfg);
                if !(residual <= cfg.tol) {
                    return Err(Error::DysonNonConvergence { iterations, residual });
                }
                Ok(2.0 / PI * prof.mean(&g).im)
            })
            .collect()
    };
    let density = eval(grid)?;
    let eigen_density = grid.iter().zip(&density).map(|(x, q)| q / (2.0 * x)).collect();

    let tail_mass = match (grid.first(), grid.last()) {
        (Some(&x0), Some(&x1)) => {
            let left = x0 * density[0];
            let far = x1 + 1000.0 * eta;
            let xs: Vec<f64> = (0..=200).map(|k| x1 * (far / x1).powf(k as f64 / 200.0)).collect();
            let qs = eval(&xs)?;
            let right: f64 = xs.windows(2).zip(qs.windows(2)).map(|(x, q)| 0.5 * (x[1] - x[0]) * (q[0] + q[1])).sum();
            // Beyond `far`, ⟨g⟩ ≈ −1/w, whose density integrates in closed form.
            let beyond = 2.0 / PI * (PI / 2.0 - (far / eta).atan());
            left + right + beyond
        }
        _ => 0.0,
    };
    Ok(DensityCurve {
        grid: grid.to_vec(),
        density,
        eigen_density,
        eta,
        tail_mass,
        coordinates: COORDINATES_NOTE.into(),
    })
}

/// `points` equally spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![lo],
        k => (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect(),
    }
}
