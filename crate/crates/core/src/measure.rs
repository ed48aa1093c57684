//! Exponential families of base measures.
//!
//! A base measure `μ` on the real line is described by its log-partition
//! `ψ(θ) = log ∫ e^{θx} μ(dx)`, the derivatives `ψ'` (mean map) and `ψ''`
//! (variance), and the inverse mean map `φ = (ψ')⁻¹`. The tilted law `μ_θ`
//! has density `e^{θx − ψ(θ)}` against `μ`.
//!
//! [`ExponentialFamily`] is the extension point; [`BaseMeasure`] implements
//! it for the built-in families.

use std::f64::consts::{LN_2, SQRT_2};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Exp, Geometric, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::erf::erfc;
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::error::{Error, Result};
use crate::roots::{guarded, solve_increasing, RootConfig, RootFailure};

/// Interface every base measure implements.
///
/// All evaluation methods clamp `θ` into a closed interval strictly inside
/// the natural-parameter domain, so callers never see `ψ` blow up at a
/// finite boundary. Sampling, by contrast, rejects out-of-domain tilts.
pub trait ExponentialFamily: Send + Sync {
    /// Identifier (`family[:p1,p2]`) that reconstructs this measure.
    fn name(&self) -> String;

    /// Open interval `Θ°`, endpoints possibly infinite.
    fn theta_domain(&self) -> (f64, f64);

    /// `(A, B)`: the closure of the convex hull of the support.
    fn support_bounds(&self) -> (f64, f64);

    fn psi(&self, theta: f64) -> f64;
    fn psi_prime(&self, theta: f64) -> f64;
    fn psi_double_prime(&self, theta: f64) -> f64;

    fn is_discrete(&self) -> bool;

    /// Whether `ψ''` is increasing and log-convex on `Θ°`.
    fn psi_dd_increasing_logconvex(&self) -> bool;

    /// Fills `out` with i.i.d. draws from `μ_θ`.
    fn sample_into(&self, theta: f64, out: &mut [f64], rng: &mut dyn RngCore) -> Result<()>;

    /// Inverse mean map. Defaults to the numeric inversion.
    fn phi(&self, x: f64) -> Result<f64> {
        phi_numeric(self, x, 1e-13)
    }

    /// CDF of `μ_θ` at `x`, when available in closed form.
    fn cdf(&self, _theta: f64, _x: f64) -> Option<f64> {
        None
    }

    /// `log μ({x})` for discrete measures (`-inf` off the support).
    fn log_base_mass(&self, _x: f64) -> Option<f64> {
        None
    }

    /// Support atoms not exceeding `cap`, for discrete measures.
    fn atoms(&self, _cap: f64) -> Option<Vec<f64>> {
        None
    }

    /// Clamps `θ` into the guarded interior of `Θ°`.
    fn clamp_theta(&self, theta: f64) -> f64 {
        let (lo, hi) = self.theta_domain();
        let (glo, ghi) = guarded(lo, hi);
        theta.clamp(glo, ghi)
    }

    fn check_tilt(&self, theta: f64) -> Result<()> {
        let (lo, hi) = self.theta_domain();
        if theta.is_finite() && theta > lo && theta < hi {
            Ok(())
        } else {
            Err(Error::TiltOutOfDomain { theta, lo, hi })
        }
    }

    fn in_support_interior(&self, x: f64) -> bool {
        let (a, b) = self.support_bounds();
        x > a && x < b
    }

    /// Probability mass (discrete) of `μ_θ` at `x`.
    fn pmf(&self, theta: f64, x: f64) -> Option<f64> {
        self.log_base_mass(x)
            .map(|lm| (lm + theta * x - self.psi(theta)).exp())
    }
}

/// Solves `ψ'(θ) = x` by bracket expansion and safeguarded Newton/bisection.
///
/// The result satisfies `|ψ'(θ) − x| ≤ tol·max(1, |x|)` unless floating-point
/// resolution near a finite domain boundary prevents it, in which case the
/// closest representable root is returned.
pub fn phi_numeric<M: ExponentialFamily + ?Sized>(m: &M, x: f64, tol: f64) -> Result<f64> {
    if !m.in_support_interior(x) {
        let (a, b) = m.support_bounds();
        return Err(Error::Domain(format!("mean {x} outside ({a}, {b})")));
    }
    let (lo, hi) = m.theta_domain();
    let start = match (lo.is_finite(), hi.is_finite()) {
        (true, true) => 0.5 * (lo + hi),
        _ => 0.0,
    };
    let cfg = RootConfig {
        max_expansions: 200,
        max_bisections: 80,
        newton_polish: 5,
    };
    let f = |t: f64| (m.psi_prime(t) - x, m.psi_double_prime(t));
    solve_increasing(f, start, lo, hi, tol * x.abs().max(1.0), cfg).map_err(|e| match e {
        RootFailure::Escape { .. } => {
            Error::Domain(format!("no bracket for φ({x}) after 200 expansions"))
        }
        RootFailure::NotFinite(t) => Error::Domain(format!("ψ' not finite at θ={t}")),
    })
}

/// `D(μ_{φ(x)} ‖ μ) = xφ(x) − ψ(φ(x))`, with `+∞` outside `(A, B)`.
pub fn relative_entropy<M: ExponentialFamily + ?Sized>(m: &M, x: f64) -> f64 {
    if !m.in_support_interior(x) {
        return f64::INFINITY;
    }
    match m.phi(x) {
        Ok(t) => x * t - m.psi(t),
        Err(_) => f64::INFINITY,
    }
}

/// Draws `n` samples from `μ_θ`.
pub fn sample_tilted<M: ExponentialFamily + ?Sized>(
    m: &M,
    theta: f64,
    n: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    m.sample_into(theta, &mut out, rng)?;
    Ok(out)
}

/// The built-in families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum Family {
    /// Standard normal base.
    Gaussian,
    /// `μ({k}) = 1/k!`.
    Poisson,
    /// `Binomial(B, 1/2)`; `B = 1` is the Bernoulli case.
    Binomial { trials: u32 },
    /// Counting measure on the non-negative integers.
    Counting,
    /// `r`-fold convolution of the counting measure.
    NegBinom { r: u32 },
    /// Density `x^{γ−1} e^{−ax}` on `(0, ∞)`; `a = 0, γ = 1` is Lebesgue.
    Gamma { rate: f64, shape: f64 },
    /// Density `½e^{−|x|}`.
    Laplace,
    /// Uniform on `{0, 1, √2}`.
    ThreePoint,
}

const THREE_POINT: [f64; 3] = [0.0, 1.0, SQRT_2];

/// One of the built-in measures, plus the display name it was created with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseMeasure {
    family: Family,
    label: String,
}

impl BaseMeasure {
    /// Builds a measure from a family identifier and its parameters.
    pub fn new(name: &str, params: &[f64]) -> Result<Self> {
        let key = name.trim().to_ascii_lowercase();
        let bad = |reason: &str| Error::InvalidParameters {
            family: key.clone(),
            reason: reason.to_string(),
        };
        let want = |k: usize| -> Result<()> {
            if params.len() == k {
                Ok(())
            } else {
                Err(Error::InvalidParameters {
                    family: key.clone(),
                    reason: format!("expected {k} parameter(s), got {}", params.len()),
                })
            }
        };
        let positive_int = |v: f64| -> Option<u32> {
            (v.is_finite() && v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64).then_some(v as u32)
        };
        let family = match key.as_str() {
            "gaussian" | "normal" => {
                want(0)?;
                Family::Gaussian
            }
            "poisson" => {
                want(0)?;
                Family::Poisson
            }
            "bernoulli" => {
                want(0)?;
                Family::Binomial { trials: 1 }
            }
            "binomial" => {
                want(1)?;
                let trials = positive_int(params[0]).ok_or_else(|| bad("B must be an integer ≥ 1"))?;
                Family::Binomial { trials }
            }
            "counting" | "geometric" => {
                want(0)?;
                Family::Counting
            }
            "negbinom" => {
                want(1)?;
                let r = positive_int(params[0]).ok_or_else(|| bad("r must be an integer ≥ 1"))?;
                Family::NegBinom { r }
            }
            "lebesgue" | "exponential" => {
                want(0)?;
                Family::Gamma { rate: 0.0, shape: 1.0 }
            }
            "gamma" => {
                want(2)?;
                let (rate, shape) = (params[0], params[1]);
                if !(rate.is_finite() && rate >= 0.0) {
                    return Err(bad("a must be finite and ≥ 0"));
                }
                if !(shape.is_finite() && shape > 0.0) {
                    return Err(bad("γ must be finite and > 0"));
                }
                Family::Gamma { rate, shape }
            }
            "laplace" => {
                want(0)?;
                Family::Laplace
            }
            "three-point" | "threepoint" | "uniform3" => {
                want(0)?;
                Family::ThreePoint
            }
            _ => return Err(Error::UnknownFamily(name.to_string())),
        };
        Ok(Self::from_family(family))
    }

    pub fn from_family(family: Family) -> Self {
        let label = match family {
            Family::Gaussian => "gaussian".into(),
            Family::Poisson => "poisson".into(),
            Family::Binomial { trials: 1 } => "bernoulli".into(),
            Family::Binomial { trials } => format!("binomial:{trials}"),
            Family::Counting => "counting".into(),
            Family::NegBinom { r } => format!("negbinom:{r}"),
            Family::Gamma { rate, shape } if rate == 0.0 && shape == 1.0 => "lebesgue".into(),
            Family::Gamma { rate, shape } => format!("gamma:{rate},{shape}"),
            Family::Laplace => "laplace".into(),
            Family::ThreePoint => "three-point".into(),
        };
        Self { family, label }
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn gaussian() -> Self {
        Self::from_family(Family::Gaussian)
    }
    pub fn poisson() -> Self {
        Self::from_family(Family::Poisson)
    }
    pub fn counting() -> Self {
        Self::from_family(Family::Counting)
    }
    pub fn bernoulli() -> Self {
        Self::from_family(Family::Binomial { trials: 1 })
    }
    pub fn lebesgue() -> Self {
        Self::from_family(Family::Gamma { rate: 0.0, shape: 1.0 })
    }
    pub fn three_point() -> Self {
        Self::from_family(Family::ThreePoint)
    }

    /// The nine measures with closed forms, using representative parameters.
    pub fn catalog() -> Vec<Self> {
        vec![
            Self::gaussian(),
            Self::poisson(),
            Self::from_family(Family::Binomial { trials: 5 }),
            Self::bernoulli(),
            Self::counting(),
            Self::from_family(Family::NegBinom { r: 5 }),
            Self::lebesgue(),
            Self::from_family(Family::Gamma { rate: 1.0, shape: 2.0 }),
            Self::from_family(Family::Laplace),
        ]
    }

    fn three_point_moments(theta: f64) -> (f64, f64, f64) {
        let mx = THREE_POINT.iter().map(|v| theta * v).fold(f64::NEG_INFINITY, f64::max);
        let w: [f64; 3] = THREE_POINT.map(|v| (theta * v - mx).exp());
        let z: f64 = w.iter().sum();
        let mean = THREE_POINT.iter().zip(&w).map(|(v, w)| v * w).sum::<f64>() / z;
        let var = THREE_POINT
            .iter()
            .zip(&w)
            .map(|(v, w)| (v - mean).powi(2) * w)
            .sum::<f64>()
            / z;
        (mx + (z / 3.0).ln(), mean, var)
    }
}

impl fmt::Display for BaseMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}

impl FromStr for BaseMeasure {
    type Err = Error;

    /// Parses `family[:p1,p2,...]`, e.g. `gamma:1.0,2.0` or `binomial:5`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, rest) = match s.split_once(':') {
            Some((n, r)) => (n, Some(r)),
            None => (s, None),
        };
        let params = match rest {
            None => Vec::new(),
            Some(r) => r
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Parse(format!("bad measure parameter `{p}` in `{s}`")))
                })
                .collect::<Result<Vec<_>>>()?,
        };
        BaseMeasure::new(name, &params)
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn ln_factorial(k: f64) -> f64 {
    ln_gamma(k + 1.0)
}

fn ln_choose(n: f64, k: f64) -> f64 {
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

fn is_nonneg_int(x: f64) -> bool {
    x >= 0.0 && x.fract() == 0.0 && x.is_finite()
}

impl ExponentialFamily for BaseMeasure {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn theta_domain(&self) -> (f64, f64) {
        use Family::*;
        match self.family {
            Gaussian | Poisson | Binomial { .. } | ThreePoint => (f64::NEG_INFINITY, f64::INFINITY),
            Counting | NegBinom { .. } => (f64::NEG_INFINITY, 0.0),
            Gamma { rate, .. } => (f64::NEG_INFINITY, rate),
            Laplace => (-1.0, 1.0),
        }
    }

    fn support_bounds(&self) -> (f64, f64) {
        use Family::*;
        match self.family {
            Gaussian | Laplace => (f64::NEG_INFINITY, f64::INFINITY),
            Poisson | Counting | NegBinom { .. } | Gamma { .. } => (0.0, f64::INFINITY),
            Binomial { trials } => (0.0, trials as f64),
            ThreePoint => (0.0, SQRT_2),
        }
    }

    fn psi(&self, theta: f64) -> f64 {
        use Family::*;
        let t = self.clamp_theta(theta);
        match self.family {
            Gaussian => 0.5 * t * t,
            Poisson => t.exp(),
            Binomial { trials } => trials as f64 * (softplus(t) - LN_2),
            Counting => -(-t.exp_m1()).ln(),
            NegBinom { r } => -(r as f64) * (-t.exp_m1()).ln(),
            Gamma { rate, shape } => ln_gamma(shape) - shape * (rate - t).ln(),
            Laplace => -((1.0 - t).ln() + (1.0 + t).ln()),
            ThreePoint => Self::three_point_moments(t).0,
        }
    }

    fn psi_prime(&self, theta: f64) -> f64 {
        use Family::*;
        let t = self.clamp_theta(theta);
        match self.family {
            Gaussian => t,
            Poisson => t.exp(),
            Binomial { trials } => trials as f64 * sigmoid(t),
            Counting => 1.0 / (-t).exp_m1(),
            NegBinom { r } => r as f64 / (-t).exp_m1(),
            Gamma { rate, shape } => shape / (rate - t),
            Laplace => 2.0 * t / ((1.0 - t) * (1.0 + t)),
            ThreePoint => Self::three_point_moments(t).1,
        }
    }

    fn psi_double_prime(&self, theta: f64) -> f64 {
        use Family::*;
        let t = self.clamp_theta(theta);
        match self.family {
            Gaussian => 1.0,
            Poisson => t.exp(),
            Binomial { trials } => trials as f64 * sigmoid(t) * sigmoid(-t),
            Counting => {
                let p = 1.0 / (-t).exp_m1();
                p * (1.0 + p)
            }
            NegBinom { r } => {
                let p = 1.0 / (-t).exp_m1();
                r as f64 * p * (1.0 + p)
            }
            Gamma { rate, shape } => shape / ((rate - t) * (rate - t)),
            Laplace => {
                let d = (1.0 - t) * (1.0 + t);
                2.0 * (1.0 + t * t) / (d * d)
            }
            ThreePoint => Self::three_point_moments(t).2,
        }
    }

    fn phi(&self, x: f64) -> Result<f64> {
        use Family::*;
        if !self.in_support_interior(x) {
            let (a, b) = self.support_bounds();
            return Err(Error::Domain(format!("mean {x} outside ({a}, {b})")));
        }
        Ok(match self.family {
            Gaussian => x,
            Poisson => x.ln(),
            Binomial { trials } => (x / (trials as f64 - x)).ln(),
            Counting => -(1.0 / x).ln_1p(),
            NegBinom { r } => -(r as f64 / x).ln_1p(),
            Gamma { rate, shape } => rate - shape / x,
            // Positive root of x θ² + 2θ − x = 0, written without cancellation.
            Laplace => x / (1.0 + (1.0 + x * x).sqrt()),
            ThreePoint => return phi_numeric(self, x, 1e-14),
        })
    }

    fn is_discrete(&self) -> bool {
        use Family::*;
        matches!(
            self.family,
            Poisson | Binomial { .. } | Counting | NegBinom { .. } | ThreePoint
        )
    }

    fn psi_dd_increasing_logconvex(&self) -> bool {
        use Family::*;
        matches!(
            self.family,
            Gaussian | Poisson | Counting | NegBinom { .. } | Gamma { .. }
        )
    }

    fn sample_into(&self, theta: f64, out: &mut [f64], rng: &mut dyn RngCore) -> Result<()> {
        use Family::*;
        self.check_tilt(theta)?;
        let invalid = |e: String| Error::Domain(format!("sampler construction failed at θ={theta}: {e}"));
        match self.family {
            Gaussian => {
                let d = Normal::new(theta, 1.0).map_err(|e| invalid(e.to_string()))?;
                out.iter_mut().for_each(|v| *v = d.sample(rng));
            }
            Poisson => {
                let d = rand_distr::Poisson::new(theta.exp()).map_err(|e| invalid(e.to_string()))?;
                out.iter_mut().for_each(|v| *v = d.sample(rng));
            }
            Binomial { trials } => {
                let d = rand_distr::Binomial::new(trials as u64, sigmoid(theta))
                    .map_err(|e| invalid(e.to_string()))?;
                out.iter_mut().for_each(|v| *v = d.sample(rng) as f64);
            }
            Counting => {
                // Number of failures before the first success, success prob 1 − e^θ.
                let d = Geometric::new(-theta.exp_m1()).map_err(|e| invalid(e.to_string()))?;
                out.iter_mut().for_each(|v| *v = d.sample(rng) as f64);
            }
            NegBinom { r } => {
                // Gamma–Poisson mixture: Gamma(r, e^θ/(1−e^θ)) intensity.
                let scale = theta.exp() / -theta.exp_m1();
                let g = rand_distr::Gamma::new(r as f64, scale).map_err(|e| invalid(e.to_string()))?;
                for v in out.iter_mut() {
                    let lam: f64 = g.sample(rng);
                    *v = if lam > 0.0 {
                        rand_distr::Poisson::new(lam)
                            .map_err(|e| invalid(e.to_string()))?
                            .sample(rng)
                    } else {
                        0.0
                    };
                }
            }
            Gamma { rate, shape } => {
                let d = rand_distr::Gamma::new(shape, 1.0 / (rate - theta))
                    .map_err(|e| invalid(e.to_string()))?;
                out.iter_mut().for_each(|v| *v = d.sample(rng));
            }
            Laplace => {
                // Left half carries mass (1−θ)/2 with rate 1+θ; right half rate 1−θ.
                let left = Exp::new(1.0 + theta).map_err(|e| invalid(e.to_string()))?;
                let right = Exp::new(1.0 - theta).map_err(|e| invalid(e.to_string()))?;
                let p_left = 0.5 * (1.0 - theta);
                for v in out.iter_mut() {
                    *v = if rng.random::<f64>() < p_left {
                        -left.sample(rng)
                    } else {
                        right.sample(rng)
                    };
                }
            }
            ThreePoint => {
                let lp = self.psi(theta);
                let p0 = (-lp).exp() / 3.0;
                let p1 = (theta - lp).exp() / 3.0;
                for v in out.iter_mut() {
                    let u: f64 = rng.random();
                    *v = if u < p0 {
                        0.0
                    } else if u < p0 + p1 {
                        1.0
                    } else {
                        SQRT_2
                    };
                }
            }
        }
        Ok(())
    }

    fn cdf(&self, theta: f64, x: f64) -> Option<f64> {
        use Family::*;
        if self.check_tilt(theta).is_err() {
            return None;
        }
        Some(match self.family {
            Gaussian => 0.5 * erfc(-(x - theta) / SQRT_2),
            Gamma { rate, shape } => {
                if x <= 0.0 {
                    0.0
                } else {
                    gamma_lr(shape, (rate - theta) * x)
                }
            }
            Laplace => {
                if x < 0.0 {
                    0.5 * (1.0 - theta) * ((1.0 + theta) * x).exp()
                } else {
                    1.0 - 0.5 * (1.0 + theta) * (-(1.0 - theta) * x).exp()
                }
            }
            Counting => {
                if x < 0.0 {
                    0.0
                } else {
                    -(theta * (x.floor() + 1.0)).exp_m1()
                }
            }
            Binomial { trials } => {
                let k = x.floor();
                if k < 0.0 {
                    0.0
                } else if k >= trials as f64 {
                    1.0
                } else {
                    // P(X ≤ k) = I_{1−p}(B−k, k+1).
                    beta_reg(trials as f64 - k, k + 1.0, sigmoid(-theta))
                }
            }
            Poisson => {
                if x < 0.0 {
                    0.0
                } else {
                    statrs::function::gamma::gamma_ur(x.floor() + 1.0, theta.exp())
                }
            }
            NegBinom { r } => {
                if x < 0.0 {
                    0.0
                } else {
                    // P(X ≤ k) = I_{1−e^θ}(r, k+1).
                    beta_reg(r as f64, x.floor() + 1.0, -theta.exp_m1())
                }
            }
            ThreePoint => {
                let lp = self.psi(theta);
                THREE_POINT
                    .iter()
                    .filter(|&&v| v <= x)
                    .map(|v| (theta * v - lp).exp() / 3.0)
                    .sum::<f64>()
                    .min(1.0)
            }
        })
    }

    fn log_base_mass(&self, x: f64) -> Option<f64> {
        use Family::*;
        let out_of_support = f64::NEG_INFINITY;
        match self.family {
            Poisson => Some(if is_nonneg_int(x) { -ln_factorial(x) } else { out_of_support }),
            Counting => Some(if is_nonneg_int(x) { 0.0 } else { out_of_support }),
            Binomial { trials } => {
                let b = trials as f64;
                Some(if is_nonneg_int(x) && x <= b {
                    ln_choose(b, x) - b * LN_2
                } else {
                    out_of_support
                })
            }
            NegBinom { r } => {
                let r = r as f64;
                Some(if is_nonneg_int(x) {
                    ln_choose(x + r - 1.0, x)
                } else {
                    out_of_support
                })
            }
            ThreePoint => Some(if THREE_POINT.contains(&x) { -(3f64.ln()) } else { out_of_support }),
            Gaussian | Gamma { .. } | Laplace => None,
        }
    }

    fn atoms(&self, cap: f64) -> Option<Vec<f64>> {
        use Family::*;
        let ints = |top: f64| -> Vec<f64> {
            let top = top.floor().max(-1.0) as i64;
            (0..=top).map(|k| k as f64).collect()
        };
        match self.family {
            Poisson | Counting | NegBinom { .. } => Some(ints(cap)),
            Binomial { trials } => Some(ints(cap.min(trials as f64))),
            ThreePoint => Some(THREE_POINT.iter().copied().filter(|&v| v <= cap).collect()),
            Gaussian | Gamma { .. } | Laplace => None,
        }
    }
}

/// The interval `[A_δ, B_δ] = [max(A+δ, −1/δ), min(B−δ, 1/δ)]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TamenessBand {
    pub delta: f64,
    pub a_delta: f64,
    pub b_delta: f64,
}

impl TamenessBand {
    /// Returns `None` when the band is empty for this `δ`.
    pub fn new<M: ExponentialFamily + ?Sized>(m: &M, delta: f64) -> Option<Self> {
        if !(delta > 0.0) {
            return None;
        }
        let (a, b) = m.support_bounds();
        let a_delta = (a + delta).max(-1.0 / delta);
        let b_delta = (b - delta).min(1.0 / delta);
        (a_delta < b_delta).then_some(Self { delta, a_delta, b_delta })
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.a_delta && x <= self.b_delta
    }

    /// `(φ(A_δ), φ(B_δ))`.
    pub fn theta_band<M: ExponentialFamily + ?Sized>(&self, m: &M) -> Result<(f64, f64)> {
        Ok((m.phi(self.a_delta)?, m.phi(self.b_delta)?))
    }
}

/// Largest `δ` for which every value lies in `[A_δ, B_δ]`.
pub fn realized_delta<M: ExponentialFamily + ?Sized>(m: &M, values: impl IntoIterator<Item = f64>) -> f64 {
    let (a, b) = m.support_bounds();
    let mut delta = f64::INFINITY;
    for z in values {
        if a.is_finite() {
            delta = delta.min(z - a);
        }
        if b.is_finite() {
            delta = delta.min(b - z);
        }
        if z != 0.0 {
            delta = delta.min(1.0 / z.abs());
        }
    }
    delta
}

/// Supremum and infimum of `ψ''` over `[lo, hi] ∩ Θ°`, on a uniform grid
/// including both endpoints.
pub fn psi_dd_range<M: ExponentialFamily + ?Sized>(m: &M, lo: f64, hi: f64, points: usize) -> (f64, f64) {
    let lo = m.clamp_theta(lo);
    let hi = m.clamp_theta(hi);
    let k = points.max(2);
    let mut mn = f64::INFINITY;
    let mut mx = f64::NEG_INFINITY;
    for i in 0..k {
        let t = if hi > lo { lo + (hi - lo) * i as f64 / (k - 1) as f64 } else { lo };
        let v = m.psi_double_prime(t);
        mn = mn.min(v);
        mx = mx.max(v);
    }
    (mn, mx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn interior_grid(m: &BaseMeasure) -> Vec<f64> {
        let (lo, hi) = m.theta_domain();
        let (lo, hi) = (lo.max(-4.0), hi.min(3.0));
        let (lo, hi) = (lo + 0.05 * (hi - lo), hi - 0.05 * (hi - lo));
        (0..=20).map(|i| lo + (hi - lo) * i as f64 / 20.0).collect()
    }

    fn all_measures() -> Vec<BaseMeasure> {
        let mut v = BaseMeasure::catalog();
        v.push(BaseMeasure::three_point());
        v
    }

    #[test]
    fn gaussian_closed_forms() {
        let g: BaseMeasure = "gaussian".parse().unwrap();
        assert_eq!(g.psi(3.0), 4.5);
        assert_eq!(g.phi(0.7).unwrap(), 0.7);
        assert_eq!(g.support_bounds(), (f64::NEG_INFINITY, f64::INFINITY));
        assert_eq!(g.theta_domain(), (f64::NEG_INFINITY, f64::INFINITY));
    }

    #[test]
    fn counting_closed_forms() {
        let c = BaseMeasure::counting();
        assert_eq!(c.theta_domain(), (f64::NEG_INFINITY, 0.0));
        assert_eq!(c.support_bounds(), (0.0, f64::INFINITY));
        assert_relative_eq!(c.phi(1.0).unwrap(), -LN_2, epsilon = 1e-15);
        assert_relative_eq!(c.phi(3.0).unwrap(), -(4.0f64 / 3.0).ln(), epsilon = 1e-15);
    }

    #[test]
    fn poisson_mean_at_zero() {
        assert_eq!(BaseMeasure::poisson().psi_prime(0.0), 1.0);
    }

    #[test]
    fn parse_and_display_round_trip() {
        for s in ["gamma:1,2", "binomial:5", "negbinom:5", "bernoulli", "lebesgue", "laplace", "three-point"] {
            let m: BaseMeasure = s.parse().unwrap();
            let again: BaseMeasure = m.to_string().parse().unwrap();
            assert_eq!(m, again);
        }
    }

    #[test]
    fn parse_errors() {
        assert!(matches!("cauchy".parse::<BaseMeasure>(), Err(Error::UnknownFamily(_))));
        assert!(matches!("binomial:0".parse::<BaseMeasure>(), Err(Error::InvalidParameters { .. })));
        assert!(matches!("binomial:2.5".parse::<BaseMeasure>(), Err(Error::InvalidParameters { .. })));
        assert!(matches!("gamma:-1,2".parse::<BaseMeasure>(), Err(Error::InvalidParameters { .. })));
        assert!(matches!("gamma:1,0".parse::<BaseMeasure>(), Err(Error::InvalidParameters { .. })));
        assert!(matches!("negbinom".parse::<BaseMeasure>(), Err(Error::InvalidParameters { .. })));
        assert!(matches!("gamma:1,x".parse::<BaseMeasure>(), Err(Error::Parse(_))));
    }

    #[test]
    fn relative_entropy_examples() {
        assert_relative_eq!(relative_entropy(&BaseMeasure::gaussian(), 2.0), 2.0, epsilon = 1e-15);
        assert_relative_eq!(relative_entropy(&BaseMeasure::poisson(), 1.0), -1.0, epsilon = 1e-15);
        assert_relative_eq!(relative_entropy(&BaseMeasure::counting(), 1.0), -2.0 * LN_2, epsilon = 1e-14);
        assert_eq!(relative_entropy(&BaseMeasure::counting(), 0.0), f64::INFINITY);
        assert_eq!(relative_entropy(&BaseMeasure::bernoulli(), 1.0), f64::INFINITY);
    }

    #[test]
    fn phi_numeric_examples() {
        assert_relative_eq!(phi_numeric(&BaseMeasure::gaussian(), 0.3, 1e-14).unwrap(), 0.3, epsilon = 1e-13);
        assert_relative_eq!(phi_numeric(&BaseMeasure::counting(), 1.0, 1e-14).unwrap(), -LN_2, epsilon = 1e-12);
        let lap: BaseMeasure = "laplace".parse().unwrap();
        assert!(phi_numeric(&lap, 0.0, 1e-14).unwrap().abs() < 1e-13);
        assert!(matches!(phi_numeric(&BaseMeasure::counting(), -1.0, 1e-12), Err(Error::Domain(_))));
    }

    #[test]
    fn three_point_phi_at_one() {
        // ψ'(θ) = 1 ⟺ e^{√2θ}(√2 − 1) = 1.
        let t = BaseMeasure::three_point().phi(1.0).unwrap();
        assert_relative_eq!(t, (1.0 + SQRT_2).ln() / SQRT_2, epsilon = 1e-12);
    }

    #[test]
    fn laplace_closed_form_phi_inverts_mean_map() {
        let lap: BaseMeasure = "laplace".parse().unwrap();
        for t in interior_grid(&lap) {
            let x = lap.psi_prime(t);
            assert_relative_eq!(lap.phi(x).unwrap(), t, epsilon = 1e-12);
            assert_relative_eq!(phi_numeric(&lap, x, 1e-14).unwrap(), t, epsilon = 1e-10);
        }
    }

    #[test]
    fn round_trip_and_monotone_mean_on_grid() {
        for m in all_measures() {
            let grid = interior_grid(&m);
            for w in grid.windows(2) {
                assert!(m.psi_prime(w[0]) < m.psi_prime(w[1]), "{m}: ψ' not increasing");
            }
            for &t in &grid {
                assert!(m.psi_double_prime(t) > 0.0, "{m}: ψ'' not positive at {t}");
                let back = m.phi(m.psi_prime(t)).unwrap();
                assert!((back - t).abs() <= 1e-9 * (1.0 + t.abs()), "{m}: φ(ψ'({t})) = {back}");
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-5;
        for m in all_measures() {
            for t in interior_grid(&m) {
                let d1 = (m.psi(t + h) - m.psi(t - h)) / (2.0 * h);
                let p1 = m.psi_prime(t);
                assert!((d1 - p1).abs() <= 1e-6 * p1.abs().max(1.0), "{m}: ψ' at {t}: {d1} vs {p1}");
                let h2 = 1e-4;
                let d2 = (m.psi(t + h2) - 2.0 * m.psi(t) + m.psi(t - h2)) / (h2 * h2);
                let p2 = m.psi_double_prime(t);
                let scale = p2.abs().max(m.psi(t).abs() * 1e-4);
                assert!((d2 - p2).abs() <= 1e-4 * scale.max(1.0), "{m}: ψ'' at {t}: {d2} vs {p2}");
            }
        }
    }

    #[test]
    fn logconvex_flag_is_truthful() {
        for m in all_measures().into_iter().filter(|m| m.psi_dd_increasing_logconvex()) {
            let grid = interior_grid(&m);
            let v: Vec<f64> = grid.iter().map(|&t| m.psi_double_prime(t)).collect();
            for w in v.windows(2) {
                assert!(w[1] >= w[0] * (1.0 - 1e-12), "{m}: ψ'' decreasing");
            }
            for w in v.windows(3) {
                let s0 = w[1].ln() - w[0].ln();
                let s1 = w[2].ln() - w[1].ln();
                assert!(s1 >= s0 - 1e-10, "{m}: log ψ'' not convex");
            }
        }
        assert!(!BaseMeasure::bernoulli().psi_dd_increasing_logconvex());
        assert!(!"laplace".parse::<BaseMeasure>().unwrap().psi_dd_increasing_logconvex());
    }

    #[test]
    fn clamp_keeps_psi_finite_at_boundary() {
        let c = BaseMeasure::counting();
        assert!(c.psi(0.0).is_finite());
        assert!(c.psi_prime(5.0).is_finite());
        let lap: BaseMeasure = "laplace".parse().unwrap();
        assert!(lap.psi(1.0).is_finite());
    }

    #[test]
    fn sampler_rejects_out_of_domain() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_tilted(&BaseMeasure::counting(), 0.0, 3, &mut rng),
            Err(Error::TiltOutOfDomain { .. })
        ));
    }

    #[test]
    fn sampler_means_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        let g = mean(sample_tilted(&BaseMeasure::gaussian(), 0.0, n, &mut rng).unwrap());
        assert!(g.abs() < 0.02);
        let c = mean(sample_tilted(&BaseMeasure::counting(), -LN_2, n, &mut rng).unwrap());
        assert!((c - 1.0).abs() < 0.03);
        let gm: BaseMeasure = "gamma:1,2".parse().unwrap();
        let a = mean(sample_tilted(&gm, 0.0, n, &mut rng).unwrap());
        assert!((a - 2.0).abs() < 0.05);
    }

    #[test]
    fn sampler_means_within_five_standard_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 40_000;
        for m in all_measures() {
            for t in interior_grid(&m).into_iter().step_by(5) {
                let v = sample_tilted(&m, t, n, &mut rng).unwrap();
                let mean = v.iter().sum::<f64>() / n as f64;
                let bound = 5.0 * (m.psi_double_prime(t) / n as f64).sqrt();
                assert!((mean - m.psi_prime(t)).abs() <= bound, "{m} at θ={t}: {mean} vs {}", m.psi_prime(t));
            }
        }
    }

    fn ks_statistic(mut draws: Vec<f64>, cdf: impl Fn(f64) -> f64, discrete: bool) -> f64 {
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = draws.len() as f64;
        let mut d: f64 = 0.0;
        let mut i = 0;
        while i < draws.len() {
            let x = draws[i];
            let mut j = i;
            while j < draws.len() && draws[j] == x {
                j += 1;
            }
            let f = cdf(x);
            d = d.max((j as f64 / n - f).abs());
            let below = if discrete { cdf(x - 1.0) } else { f };
            d = d.max((i as f64 / n - below).abs());
            i = j;
        }
        d
    }

    #[test]
    fn kolmogorov_smirnov_against_analytic_cdf() {
        // Critical value at level 1e-3 is about 1.95/√n.
        let n = 100_000;
        let crit = 1.95 / (n as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cases: Vec<(BaseMeasure, f64)> = vec![
            (BaseMeasure::gaussian(), 0.4),
            (BaseMeasure::lebesgue(), -2.0),
            (BaseMeasure::counting(), -0.5),
        ];
        for (m, t) in cases {
            let v = sample_tilted(&m, t, n, &mut rng).unwrap();
            let d = ks_statistic(v, |x| m.cdf(t, x).unwrap(), m.is_discrete());
            assert!(d < crit, "{m}: KS {d} ≥ {crit}");
        }
    }

    #[test]
    fn discrete_cdfs_agree_with_pmf_sums() {
        for m in all_measures().into_iter().filter(|m| m.is_discrete()) {
            let t = interior_grid(&m)[7];
            let atoms = m.atoms(30.0).unwrap();
            let mut acc = 0.0;
            for &x in &atoms {
                acc += m.pmf(t, x).unwrap();
                assert_relative_eq!(m.cdf(t, x).unwrap(), acc, epsilon = 1e-10, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn tameness_band_examples() {
        let b = TamenessBand::new(&BaseMeasure::bernoulli(), 0.1).unwrap();
        assert_relative_eq!(b.a_delta, 0.1);
        assert_relative_eq!(b.b_delta, 0.9);
        let g = TamenessBand::new(&BaseMeasure::gaussian(), 0.5).unwrap();
        assert_eq!((g.a_delta, g.b_delta), (-2.0, 2.0));
        assert!(TamenessBand::new(&BaseMeasure::bernoulli(), 0.6).is_none());
        assert_relative_eq!(realized_delta(&BaseMeasure::counting(), [0.5, 4.0]), 0.25);
    }

    proptest! {
        #[test]
        fn relative_entropy_is_convex(x in 0.05f64..20.0, h in 0.01f64..0.5) {
            for m in [BaseMeasure::counting(), BaseMeasure::poisson(), BaseMeasure::lebesgue()] {
                let f = |v| relative_entropy(&m, v);
                prop_assert!(f(x - h * x / 2.0) + f(x + h * x / 2.0) - 2.0 * f(x) > -1e-9);
            }
        }

        #[test]
        fn phi_inverts_psi_prime(t in -6.0f64..-0.01) {
            for m in [BaseMeasure::counting(), "negbinom:3".parse().unwrap(), BaseMeasure::lebesgue()] {
                let back = m.phi(m.psi_prime(t)).unwrap();
                prop_assert!((back - t).abs() < 1e-9 * (1.0 + t.abs()));
            }
        }
    }
}
