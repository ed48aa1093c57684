//! Row/column margins, their generators, and step-function embedding.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::ExponentialFamily;

/// Relative tolerance for total-sum consistency.
pub const TOTAL_TOL: f64 = 1e-9;

/// Row sums `r` (length `m`) and column sums `c` (length `n`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Margin {
    r: Vec<f64>,
    c: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMargin {
    r: Vec<f64>,
    c: Vec<f64>,
}

impl<'de> Deserialize<'de> for Margin {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawMargin::deserialize(d)?;
        Margin::new(raw.r, raw.c).map_err(serde::de::Error::custom)
    }
}

/// Outcome of the necessary-condition screen in [`Margin::validate`].
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "verdict", content = "reason", rename_all = "snake_case")]
pub enum Feasibility {
    ScreenPassed,
    Infeasible(String),
}

impl Feasibility {
    pub fn is_ok(&self) -> bool {
        matches!(self, Feasibility::ScreenPassed)
    }
}

impl Margin {
    /// Builds a margin. A total mismatch below `1e-9` relative is repaired by
    /// rescaling `c`; larger mismatches are kept so that [`validate`](Self::validate)
    /// can report them.
    pub fn new(r: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        if r.is_empty() || c.is_empty() {
            return Err(Error::DimensionMismatch("margins must have at least one row and one column".into()));
        }
        if r.iter().chain(&c).any(|v| !v.is_finite()) {
            return Err(Error::Parse("margin entries must be finite".into()));
        }
        let mut c = c;
        let (sr, sc): (f64, f64) = (r.iter().sum(), c.iter().sum());
        if sr != sc && sc != 0.0 && (sr - sc).abs() <= TOTAL_TOL * sr.abs().max(1.0) {
            let f = sr / sc;
            c.iter_mut().for_each(|v| *v *= f);
        }
        Ok(Self { r, c })
    }

    /// Symmetric margin with `r = c`.
    pub fn symmetric(r: Vec<f64>) -> Result<Self> {
        Self::new(r.clone(), r)
    }

    /// Constant margin `n·a·1_n` on both sides.
    pub fn constant(n: usize, a: f64) -> Result<Self> {
        Self::symmetric(vec![n as f64 * a; n])
    }

    pub fn r(&self) -> &[f64] {
        &self.r
    }
    pub fn c(&self) -> &[f64] {
        &self.c
    }
    pub fn m(&self) -> usize {
        self.r.len()
    }
    pub fn n(&self) -> usize {
        self.c.len()
    }
    /// `N = Σ r(i)`.
    pub fn total(&self) -> f64 {
        self.r.iter().sum()
    }

    pub fn is_symmetric(&self) -> bool {
        self.r == self.c
    }

    /// Whether every entry is an integer within `1e-9`.
    pub fn is_integer(&self) -> bool {
        self.r.iter().chain(&self.c).all(|v| (v - v.round()).abs() <= 1e-9)
    }

    /// Entries rounded to integers, or an error if any entry is not integral.
    pub fn integer_parts(&self) -> Result<(Vec<u32>, Vec<u32>)> {
        if !self.is_integer() || self.r.iter().chain(&self.c).any(|&v| v < -1e-9) {
            return Err(Error::Domain("margin is not a non-negative integer margin".into()));
        }
        let cvt = |v: &[f64]| v.iter().map(|x| x.round() as u32).collect();
        Ok((cvt(&self.r), cvt(&self.c)))
    }

    /// Necessary-condition screen: equal totals and every average
    /// `r(i)/n`, `c(j)/m` inside `(A, B)`.
    pub fn validate<M: ExponentialFamily + ?Sized>(&self, measure: &M) -> Feasibility {
        let (sr, sc): (f64, f64) = (self.r.iter().sum(), self.c.iter().sum());
        if (sr - sc).abs() > TOTAL_TOL * sr.abs().max(1.0) {
            return Feasibility::Infeasible(format!("row total {sr} differs from column total {sc}"));
        }
        let (a, b) = measure.support_bounds();
        let (m, n) = (self.m() as f64, self.n() as f64);
        for (i, &ri) in self.r.iter().enumerate() {
            let avg = ri / n;
            if !(avg > a && avg < b) {
                return Feasibility::Infeasible(format!("row {i}: average {avg} outside ({a}, {b})"));
            }
        }
        for (j, &cj) in self.c.iter().enumerate() {
            let avg = cj / m;
            if !(avg > a && avg < b) {
                return Feasibility::Infeasible(format!("column {j}: average {avg} outside ({a}, {b})"));
            }
        }
        Feasibility::ScreenPassed
    }

    /// `k`-fold clone: `(k·r₀ ⊗ 1_k, k·c₀ ⊗ 1_k)`, each scaled entry
    /// repeated `k` times in a contiguous block.
    pub fn clone_k(&self, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidParameters {
                family: "clone".into(),
                reason: "k must be ≥ 1".into(),
            });
        }
        let kf = k as f64;
        let blow = |v: &[f64]| v.iter().flat_map(|&x| std::iter::repeat_n(kf * x, k)).collect();
        Ok(Self {
            r: blow(&self.r),
            c: blow(&self.c),
        })
    }

    /// Barvinok margin: `⌊n^ρ⌋` entries `t·n`, then `s·n` for the rest; `c = r`.
    pub fn barvinok(n: usize, s: f64, t: f64, rho: f64) -> Result<Self> {
        let bad = |reason: String| Error::InvalidParameters {
            family: "barvinok".into(),
            reason,
        };
        if n < 2 {
            return Err(bad(format!("n must be ≥ 2, got {n}")));
        }
        if !(s > 0.0 && s <= t && t.is_finite()) {
            return Err(bad(format!("need 0 < s ≤ t, got s={s}, t={t}")));
        }
        if !(0.0..1.0).contains(&rho) {
            return Err(bad(format!("need ρ ∈ [0, 1), got {rho}")));
        }
        let big = ((n as f64).powf(rho) + 1e-9).floor() as usize;
        if big < 1 || big > n {
            return Err(bad(format!("⌊n^ρ⌋ = {big} out of range")));
        }
        let nf = n as f64;
        let mut r = vec![t * nf; big];
        r.extend(std::iter::repeat_n(s * nf, n - big));
        Self::symmetric(r)
    }

    /// `‖r − r'‖₁ + ‖c − c'‖₁`.
    pub fn l1_distance(&self, other: &Margin) -> Result<f64> {
        if self.m() != other.m() || self.n() != other.n() {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.m(),
                self.n(),
                other.m(),
                other.n()
            )));
        }
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
        Ok(d(&self.r, &other.r) + d(&self.c, &other.c))
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            r: self.r.iter().map(|v| v * k).collect(),
            c: self.c.iter().map(|v| v * k).collect(),
        }
    }

    /// `r̄(t) = r(⌈mt⌉)/n`, `c̄(t) = c(⌈nt⌉)/m`.
    pub fn to_step_margin(&self) -> StepMargin {
        let (m, n) = (self.m() as f64, self.n() as f64);
        StepMargin {
            r_bar: self.r.iter().map(|v| v / n).collect(),
            c_bar: self.c.iter().map(|v| v / m).collect(),
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("margin serializes")
    }

    /// Two lines, `r,v1,v2,...` and `c,v1,v2,...`, in either order.
    pub fn from_csv(s: &str) -> Result<Self> {
        let mut r = None;
        let mut c = None;
        for line in s.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let mut fields = line.split(',').map(str::trim);
            let tag = fields.next().unwrap_or_default();
            let vals = fields
                .filter(|f| !f.is_empty())
                .map(|f| f.parse::<f64>().map_err(|_| Error::Parse(format!("bad margin value `{f}`"))))
                .collect::<Result<Vec<_>>>()?;
            match tag {
                "r" => r = Some(vals),
                "c" => c = Some(vals),
                other => return Err(Error::Parse(format!("unexpected margin row tag `{other}`"))),
            }
        }
        match (r, c) {
            (Some(r), Some(c)) => Self::new(r, c),
            _ => Err(Error::Parse("margin CSV needs an `r,...` line and a `c,...` line".into())),
        }
    }

    pub fn to_csv(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        format!("r,{}\nc,{}\n", join(&self.r), join(&self.c))
    }

    /// Reads JSON or CSV, chosen by content.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if text.trim_start().starts_with('{') {
            Self::from_json(&text)
        } else {
            Self::from_csv(&text)
        }
    }
}

/// Piecewise-constant functions on `(0, 1]`, one value per equal-width cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMargin {
    pub r_bar: Vec<f64>,
    pub c_bar: Vec<f64>,
}

/// Evaluates a step function with `v.len()` equal cells at `t ∈ (0, 1]`.
pub fn step_eval(v: &[f64], t: f64) -> f64 {
    let k = v.len();
    let idx = ((k as f64 * t).ceil() as usize).clamp(1, k);
    v[idx - 1]
}

/// `∫₀¹ |f − g|` for two equal-cell step functions.
pub fn step_l1(f: &[f64], g: &[f64]) -> f64 {
    let mut cuts: Vec<f64> = (0..=f.len())
        .map(|i| i as f64 / f.len() as f64)
        .chain((0..=g.len()).map(|i| i as f64 / g.len() as f64))
        .collect();
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
    cuts.windows(2)
        .map(|w| {
            let mid = 0.5 * (w[0] + w[1]);
            (w[1] - w[0]) * (step_eval(f, mid) - step_eval(g, mid)).abs()
        })
        .sum()
}

impl StepMargin {
    pub fn r_at(&self, t: f64) -> f64 {
        step_eval(&self.r_bar, t)
    }
    pub fn c_at(&self, t: f64) -> f64 {
        step_eval(&self.c_bar, t)
    }

    /// `‖r̄ − r̄'‖_{L¹} + ‖c̄ − c̄'‖_{L¹}` over the common refinement.
    pub fn l1_distance(&self, other: &StepMargin) -> f64 {
        step_l1(&self.r_bar, &other.r_bar) + step_l1(&self.c_bar, &other.c_bar)
    }

    pub fn r_l1_norm(&self) -> f64 {
        self.r_bar.iter().map(|v| v.abs()).sum::<f64>() / self.r_bar.len() as f64
    }
}
