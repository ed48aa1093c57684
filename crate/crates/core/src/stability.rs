//! Lipschitz dependence of the typical table on its margin.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::margin::Margin;
use crate::measure::{psi_dd_range, realized_delta, ExponentialFamily, TamenessBand};
use crate::sinkhorn::{solve, SolverConfig, TypicalTable};

/// Grid used for the supremum of `ψ''` over the tilt band.
const PSI_DD_POINTS: usize = 1025;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// Largest `δ ≤ 1` for which both tables are `δ`-tame.
    pub delta: f64,
    /// `max(|φ(A_δ)|, |φ(B_δ)|)`.
    pub c_delta: f64,
    /// `sup ψ''` over `[φ(A_δ), φ(B_δ)]`.
    pub psi_dd_sup: f64,
    /// `‖r − r'‖₁ + ‖c − c'‖₁`.
    pub margin_l1: f64,
    /// `‖Z − Z'‖_F²`.
    pub lhs: f64,
    /// `4 C_δ · sup ψ'' · ‖Δmargin‖₁`.
    pub rhs: f64,
    /// `lhs / rhs`, reported as 0 when the margins coincide.
    pub ratio: f64,
}

impl StabilityReport {
    pub fn holds(&self) -> bool {
        self.ratio <= 1.0
    }
}

/// Compares two already-solved typical tables.
pub fn stability_from_tables<M: ExponentialFamily + ?Sized>(
    measure: &M,
    a: &Margin,
    za: &TypicalTable,
    b: &Margin,
    zb: &TypicalTable,
) -> Result<StabilityReport> {
    let margin_l1 = a.l1_distance(b)?;
    if za.z.len() != zb.z.len() {
        return Err(Error::DimensionMismatch(format!("{}x{} vs {}x{}", za.m, za.n, zb.m, zb.n)));
    }
    let delta = realized_delta(measure, za.z.iter().chain(&zb.z).copied()).min(1.0);
    if !(delta > 0.0) {
        return Err(Error::NotTame(format!("realized δ = {delta}")));
    }
    let band = TamenessBand::new(measure, delta).ok_or_else(|| Error::NotTame(format!("empty band at δ = {delta}")))?;
    let (lo, hi) = band.theta_band(measure)?;
    let c_delta = lo.abs().max(hi.abs());
    let (_, psi_dd_sup) = psi_dd_range(measure, lo, hi, PSI_DD_POINTS);
    let lhs: f64 = za.z.iter().zip(&zb.z).map(|(x, y)| (x - y) * (x - y)).sum();
    let rhs = 4.0 * c_delta * psi_dd_sup * margin_l1;
    let ratio = if margin_l1 == 0.0 { 0.0 } else { lhs / rhs };
    Ok(StabilityReport {
        delta,
        c_delta,
        psi_dd_sup,
        margin_l1,
        lhs,
        rhs,
        ratio,
    })
}

/// Solves both margins and evaluates the Lipschitz bound.
pub fn stability<M: ExponentialFamily + ?Sized>(
    measure: &M,
    a: &Margin,
    b: &Margin,
    cfg: &SolverConfig,
) -> Result<StabilityReport> {
    let sa = solve(measure, a, cfg)?;
    let sb = solve(measure, b, cfg)?;
    stability_from_tables(measure, a, &sa.table, b, &sb.table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::BaseMeasure;
    use proptest::prelude::*;

    fn gaussian_table(margin: &Margin) -> Vec<f64> {
        let (m, n) = (margin.m() as f64, margin.n() as f64);
        let total = margin.total();
        let mut z = Vec::new();
        for r in margin.r() {
            for c in margin.c() {
                z.push(r / n + c / m - total / (m * n));
            }
        }
        z
    }

    #[test]
    fn identical_margins_give_zero() {
        let g = Margin::new(vec![3.0, 5.0, 4.0], vec![6.0, 6.0]).unwrap();
        let rep = stability(&BaseMeasure::counting(), &g, &g, &SolverConfig::default()).unwrap();
        assert_eq!(rep.lhs, 0.0);
        assert_eq!(rep.margin_l1, 0.0);
        assert_eq!(rep.ratio, 0.0);
    }

    #[test]
    fn counting_row_perturbation() {
        let base = Margin::constant(10, 2.0).unwrap();
        let mut r = base.r().to_vec();
        let mut c = base.c().to_vec();
        r[0] += 1.0;
        c[3] += 1.0;
        let other = Margin::new(r, c).unwrap();
        let rep = stability(&BaseMeasure::counting(), &base, &other, &SolverConfig::default()).unwrap();
        assert!(rep.lhs > 0.0);
        assert!(rep.holds(), "{rep:?}");
    }

    #[test]
    fn rejects_boundary_table() {
        // Bernoulli margin forcing an all-ones row.
        let a = Margin::new(vec![2.0, 1.0], vec![2.0, 1.0]).unwrap();
        let z = TypicalTable {
            m: 2,
            n: 2,
            z: vec![1.0, 1.0, 1.0, 0.0],
            row_residual: 0.0,
            col_residual: 0.0,
            min_entry: 0.0,
            max_entry: 1.0,
        };
        let err = stability_from_tables(&BaseMeasure::bernoulli(), &a, &z, &a, &z).unwrap_err();
        assert!(matches!(err, Error::NotTame(_)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn gaussian_closed_form_difference(
            r in prop::collection::vec(-2.0f64..2.0, 4),
            dr in prop::collection::vec(-0.5f64..0.5, 4),
        ) {
            // Column sums absorb the total so both margins stay feasible.
            let mk = |r: Vec<f64>| {
                let t: f64 = r.iter().sum();
                Margin::new(r, vec![t / 5.0; 5]).unwrap()
            };
            let a = mk(r.clone());
            let b = mk(r.iter().zip(&dr).map(|(x, d)| x + d).collect());
            let g = BaseMeasure::gaussian();
            let rep = stability(&g, &a, &b, &SolverConfig::default()).unwrap();
            let (za, zb) = (gaussian_table(&a), gaussian_table(&b));
            let lhs: f64 = za.iter().zip(&zb).map(|(x, y)| (x - y).powi(2)).sum();
            prop_assert!((rep.lhs - lhs).abs() <= 1e-8 * (1.0 + lhs));
            prop_assert!((rep.psi_dd_sup - 1.0).abs() < 1e-12);
            prop_assert!(rep.holds());
        }
    }
}
