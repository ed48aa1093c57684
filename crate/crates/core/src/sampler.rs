//! Sampling from the tilted model `Y ~ μ_{α⊕β}` and exact conditional laws
//! on small instances.
//!
//! Randomness is split into counter-based ChaCha streams: table `k`, row
//! `i` of a run seeded with `seed` always draws from stream `(k << 32) | i`,
//! so results do not depend on the number of worker threads.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::margin::Margin;
use crate::measure::{psi_dd_range, realized_delta, ExponentialFamily, TamenessBand};
use crate::sinkhorn::{solve, Potentials, SolverConfig, TypicalTable};

/// RNG for row `row` of table `table` under master seed `seed`.
pub fn stream_rng(seed: u64, table: usize, row: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((table as u64) << 32) | row as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Tilted,
    ExactConditional,
    FisherYates,
    /// Tilted draws accepted when both margin L¹ errors are within a tolerance.
    Rejection,
}

/// A batch of `m × n` tables (row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEnsemble {
    pub m: usize,
    pub n: usize,
    pub samples: Vec<Vec<f64>>,
    pub seed: u64,
    pub origin: Origin,
}

impl TableEnsemble {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn row_sums(&self, k: usize) -> Vec<f64> {
        self.samples[k].chunks(self.n).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self, k: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.n];
        for row in self.samples[k].chunks(self.n) {
            c.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        c
    }

    /// Entrywise average over the samples.
    pub fn mean_table(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.m * self.n];
        for s in &self.samples {
            acc.iter_mut().zip(s).for_each(|(a, b)| *a += b);
        }
        let k = self.samples.len().max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        acc
    }
}

fn fill_row<M: ExponentialFamily + ?Sized>(
    m: &M,
    p: &Potentials,
    i: usize,
    out: &mut [f64],
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for (j, slot) in out.iter_mut().enumerate() {
        m.sample_into(p.alpha[i] + p.beta[j], std::slice::from_mut(slot), rng)?;
    }
    Ok(())
}

/// Draws `count` independent tables with entries `Y_ij ~ μ_{α(i)+β(j)}`.
pub fn sample_model<M: ExponentialFamily + ?Sized>(
    m: &M,
    p: &Potentials,
    count: usize,
    seed: u64,
) -> Result<TableEnsemble> {
    p.check_domain(m)?;
    let (rows, cols) = (p.alpha.len(), p.beta.len());
    let samples = (0..count)
        .into_par_iter()
        .map(|k| {
            let mut table = vec![0.0; rows * cols];
            table
                .par_chunks_mut(cols)
                .enumerate()
                .try_for_each(|(i, row)| fill_row(m, p, i, row, &mut stream_rng(seed, k, i)))?;
            Ok(table)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TableEnsemble {
        m: rows,
        n: cols,
        samples,
        seed,
        origin: Origin::Tilted,
    })
}

/// Exact draws from the standard-Gaussian base conditioned on its margin.
///
/// Given the margin, `X − Z` is the doubly centred Gaussian matrix
/// `(I − J/m) G (I − J/n)` with `G` i.i.d. standard normal, independent of
/// the tilt. `z` is the typical table.
pub fn sample_gaussian_conditional(z: &TypicalTable, count: usize, seed: u64) -> TableEnsemble {
    let (m, n) = (z.m, z.n);
    let samples = (0..count)
        .into_par_iter()
        .map(|k| {
            let mut g: Vec<f64> = vec![0.0; m * n];
            g.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
                let mut rng = stream_rng(seed, k, i);
                row.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            });
            let row_mean: Vec<f64> = g.chunks(n).map(|r| r.iter().sum::<f64>() / n as f64).collect();
            let mut col_mean = vec![0.0; n];
            for row in g.chunks(n) {
                col_mean.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            col_mean.iter_mut().for_each(|a| *a /= m as f64);
            let grand = row_mean.iter().sum::<f64>() / m as f64;
            for ((row, zrow), rm) in g.chunks_mut(n).zip(z.z.chunks(n)).zip(&row_mean) {
                for ((x, zv), cm) in row.iter_mut().zip(zrow).zip(&col_mean) {
                    *x = zv + *x - rm - cm + grand;
                }
            }
            g
        })
        .collect();
    TableEnsemble {
        m,
        n,
        samples,
        seed,
        origin: Origin::ExactConditional,
    }
}

/// Probability law on a finite set of reals (or of bins, when `edges` is set).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalLaw {
    /// Sorted support points, or bin indices when binned.
    pub support: Vec<f64>,
    pub probs: Vec<f64>,
    /// Bin edges (`support.len() + 1` of them) for binned laws.
    pub edges: Option<Vec<f64>>,
}

impl EmpiricalLaw {
    /// Builds a law from (value, weight) pairs, merging equal values and
    /// normalising the weights.
    pub fn from_weights(pairs: impl IntoIterator<Item = (f64, f64)>) -> Result<Self> {
        let mut acc: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
        let mut total = 0.0;
        for (v, w) in pairs {
            if !(w >= 0.0) || !v.is_finite() {
                return Err(Error::Domain(format!("bad law entry ({v}, {w})")));
            }
            total += w;
            acc.entry(order_key(v)).or_insert((v, 0.0)).1 += w;
        }
        if !(total > 0.0) {
            return Err(Error::Domain("law has zero total mass".into()));
        }
        let (support, probs) = acc.into_values().filter(|(_, w)| *w > 0.0).map(|(v, w)| (v, w / total)).unzip();
        Ok(Self {
            support,
            probs,
            edges: None,
        })
    }

    pub fn mass(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.support.iter().zip(&self.probs).map(|(v, p)| v * p).sum()
    }

    pub fn prob_of(&self, v: f64) -> f64 {
        self.support
            .iter()
            .position(|&s| s == v)
            .map_or(0.0, |k| self.probs[k])
    }

    /// Total-variation distance `½ Σ |p(v) − q(v)|` over the union of supports.
    pub fn tv(&self, other: &EmpiricalLaw) -> f64 {
        let mut diff: BTreeMap<u64, f64> = BTreeMap::new();
        for (v, p) in self.support.iter().zip(&self.probs) {
            *diff.entry(order_key(*v)).or_default() += p;
        }
        for (v, q) in other.support.iter().zip(&other.probs) {
            *diff.entry(order_key(*v)).or_default() -= q;
        }
        0.5 * diff.values().map(|d| d.abs()).sum::<f64>()
    }
}

/// Monotone map from finite floats to `u64`, so values sort correctly as keys.
fn order_key(v: f64) -> u64 {
    let v = if v == 0.0 { 0.0 } else { v };
    let b = v.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

/// A law on tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableLaw {
    pub m: usize,
    pub n: usize,
    /// Row-major tables.
    pub tables: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
}

impl TableLaw {
    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    pub fn is_point_mass(&self) -> bool {
        self.tables.len() == 1
    }

    pub fn mass(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn mean_table(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.m * self.n];
        for (t, p) in self.tables.iter().zip(&self.probs) {
            acc.iter_mut().zip(t).for_each(|(a, x)| *a += p * x);
        }
        acc
    }

    /// Law of the entry `(i, j)`.
    pub fn cell_law(&self, i: usize, j: usize) -> Result<EmpiricalLaw> {
        let idx = i * self.n + j;
        EmpiricalLaw::from_weights(self.tables.iter().zip(&self.probs).map(|(t, &p)| (t[idx], p)))
    }

    /// Law of the value of a uniformly chosen cell of the block.
    pub fn block_mixture(&self, block: &Block) -> Result<EmpiricalLaw> {
        block.check(self.m, self.n)?;
        let size = block.size() as f64;
        EmpiricalLaw::from_weights(self.tables.iter().zip(&self.probs).flat_map(|(t, &p)| {
            block.cells().map(move |(i, j)| (t[i * self.n + j], p / size))
        }))
    }

    /// Total variation between two laws on tables.
    pub fn tv(&self, other: &TableLaw) -> f64 {
        let key = |t: &[f64]| t.iter().map(|&v| order_key(v)).collect::<Vec<_>>();
        let mut diff: BTreeMap<Vec<u64>, f64> = BTreeMap::new();
        for (t, p) in self.tables.iter().zip(&self.probs) {
            *diff.entry(key(t)).or_default() += p;
        }
        for (t, q) in other.tables.iter().zip(&other.probs) {
            *diff.entry(key(t)).or_default() -= q;
        }
        0.5 * diff.values().map(|d| d.abs()).sum::<f64>()
    }

    /// Empirical law of an ensemble.
    pub fn from_ensemble(e: &TableEnsemble) -> Self {
        let key = |t: &[f64]| t.iter().map(|&v| order_key(v)).collect::<Vec<_>>();
        let mut acc: BTreeMap<Vec<u64>, (usize, usize)> = BTreeMap::new();
        for (k, s) in e.samples.iter().enumerate() {
            acc.entry(key(s)).or_insert((k, 0)).1 += 1;
        }
        let total = e.samples.len().max(1) as f64;
        let (tables, probs) = acc
            .into_values()
            .map(|(k, c)| (e.samples[k].clone(), c as f64 / total))
            .unzip();
        Self {
            m: e.m,
            n: e.n,
            tables,
            probs,
        }
    }
}

/// Size guards for exhaustive enumeration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnumLimits {
    pub max_cells: usize,
    pub max_total: f64,
    pub max_tables: usize,
}

impl Default for EnumLimits {
    fn default() -> Self {
        Self {
            max_cells: 20,
            max_total: 30.0,
            max_tables: 2_000_000,
        }
    }
}

/// Depth-first enumeration of every table with entries in `atoms` and the
/// exact margin, weighted by `∏ exp(log_weight(x_ij))` and normalised.
///
/// Cells are visited row-major; the last cell of each row and every cell of
/// the last row are forced by the remaining budgets.
pub fn enumerate_conditional(
    margin: &Margin,
    atoms: &[f64],
    log_weight: impl Fn(f64) -> f64,
    limits: EnumLimits,
) -> Result<TableLaw> {
    let (tables, logw) = enumerate_support(margin, atoms, &log_weight, limits)?;
    let mx = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return Err(Error::Infeasible("no table with positive weight".into()));
    }
    let w: Vec<f64> = logw.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = w.iter().sum();
    Ok(TableLaw {
        m: margin.m(),
        n: margin.n(),
        tables,
        probs: w.iter().map(|v| v / z).collect(),
    })
}

/// [`enumerate_conditional`] with the atoms and masses of a discrete measure.
/// `entry_cap` optionally bounds the entries.
pub fn enumerate_measure<M: ExponentialFamily + ?Sized>(
    m: &M,
    margin: &Margin,
    entry_cap: Option<f64>,
    limits: EnumLimits,
) -> Result<TableLaw> {
    let top = margin.r().iter().chain(margin.c()).copied().fold(0.0, f64::max);
    let cap = entry_cap.map_or(top, |c| c.min(top));
    let atoms = m
        .atoms(cap + 1e-9)
        .ok_or_else(|| Error::UnsupportedMeasure(format!("{} is not discrete", m.name())))?;
    enumerate_conditional(margin, &atoms, |x| m.log_base_mass(x).unwrap_or(f64::NEG_INFINITY), limits)
}

fn ln_factorial(k: f64) -> f64 {
    statrs::function::gamma::ln_gamma(k + 1.0)
}

/// The Fisher–Yates law `∏r(i)! ∏c(j)! / (N! ∏ x_ij!)` on integer tables.
///
/// Probabilities come from the closed form without renormalisation.
pub fn fisher_yates_exact(margin: &Margin, limits: EnumLimits) -> Result<TableLaw> {
    let (r, c) = margin.integer_parts()?;
    let total: u32 = r.iter().sum();
    let atoms: Vec<f64> = (0..=total).map(f64::from).collect();
    let (tables, _) = enumerate_support(margin, &atoms, &|_| 0.0, limits)?;
    let head: f64 = r.iter().chain(&c).map(|&v| ln_factorial(v as f64)).sum::<f64>() - ln_factorial(total as f64);
    let probs = tables
        .iter()
        .map(|t| (head - t.iter().map(|&x| ln_factorial(x)).sum::<f64>()).exp())
        .collect();
    Ok(TableLaw {
        m: margin.m(),
        n: margin.n(),
        tables,
        probs,
    })
}

fn enumerate_support(
    margin: &Margin,
    atoms: &[f64],
    log_weight: &dyn Fn(f64) -> f64,
    limits: EnumLimits,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let (m, n) = (margin.m(), margin.n());
    let total = margin.total();
    if m * n > limits.max_cells || total > limits.max_total {
        return Err(Error::InstanceTooLarge(format!(
            "{m}x{n} with total {total} exceeds enumeration limits ({} cells, total {})",
            limits.max_cells, limits.max_total
        )));
    }
    let mut atoms: Vec<f64> = atoms.to_vec();
    atoms.sort_by(f64::total_cmp);
    atoms.dedup();
    let lw: Vec<f64> = atoms.iter().map(|&a| log_weight(a)).collect();
    let mut st = Dfs {
        m,
        n,
        atoms: &atoms,
        lw: &lw,
        amax: atoms.last().copied().unwrap_or(0.0),
        tol: 1e-9 * (1.0 + total.abs()),
        rem_r: margin.r().to_vec(),
        rem_c: margin.c().to_vec(),
        cur: vec![0.0; m * n],
        tables: Vec::new(),
        logw: Vec::new(),
        max_tables: limits.max_tables,
        overflow: false,
    };
    st.visit(0, 0.0);
    if st.overflow {
        return Err(Error::InstanceTooLarge(format!("more than {} tables", limits.max_tables)));
    }
    if st.tables.is_empty() {
        return Err(Error::Infeasible("no table with the given margin and atoms".into()));
    }
    Ok((st.tables, st.logw))
}

struct Dfs<'a> {
    m: usize,
    n: usize,
    atoms: &'a [f64],
    lw: &'a [f64],
    amax: f64,
    tol: f64,
    rem_r: Vec<f64>,
    rem_c: Vec<f64>,
    cur: Vec<f64>,
    tables: Vec<Vec<f64>>,
    logw: Vec<f64>,
    max_tables: usize,
    overflow: bool,
}

impl Dfs<'_> {
    fn snap(&self, v: f64) -> Option<usize> {
        self.atoms.iter().position(|&a| (a - v).abs() <= self.tol)
    }

    fn visit(&mut self, cell: usize, acc: f64) {
        if self.overflow {
            return;
        }
        if cell == self.m * self.n {
            if self.tables.len() >= self.max_tables {
                self.overflow = true;
                return;
            }
            self.tables.push(self.cur.clone());
            self.logw.push(acc);
            return;
        }
        let (i, j) = (cell / self.n, cell % self.n);
        let forced = if j == self.n - 1 {
            Some(self.rem_r[i])
        } else if i == self.m - 1 {
            Some(self.rem_c[j])
        } else {
            None
        };
        let choices: Vec<usize> = match forced {
            Some(v) => self.snap(v).into_iter().collect(),
            None => (0..self.atoms.len()).collect(),
        };
        for k in choices {
            let a = self.atoms[k];
            if a > self.rem_r[i] + self.tol || a > self.rem_c[j] + self.tol || self.lw[k] == f64::NEG_INFINITY {
                if forced.is_none() {
                    // Atoms are sorted, so nothing larger fits either.
                    if a > self.rem_r[i] + self.tol || a > self.rem_c[j] + self.tol {
                        break;
                    }
                }
                continue;
            }
            let (nr, nc) = (self.rem_r[i] - a, self.rem_c[j] - a);
            // Last cell of the row must also close the column and vice versa.
            if j == self.n - 1 && i == self.m - 1 && (nr.abs() > self.tol || nc.abs() > self.tol) {
                continue;
            }
            if j == self.n - 1 && nr.abs() > self.tol {
                continue;
            }
            if i == self.m - 1 && nc.abs() > self.tol {
                continue;
            }
            if nr > self.amax * (self.n - 1 - j) as f64 + self.tol || nc > self.amax * (self.m - 1 - i) as f64 + self.tol {
                continue;
            }
            self.rem_r[i] = nr;
            self.rem_c[j] = nc;
            self.cur[cell] = a;
            self.visit(cell + 1, acc + self.lw[k]);
            self.rem_r[i] += a;
            self.rem_c[j] += a;
        }
        self.cur[cell] = 0.0;
    }
}

/// Exact per-cell conditional laws for integer-valued measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMarginals {
    pub m: usize,
    pub n: usize,
    /// `laws[i*n + j][v] = P(X_ij = v)`.
    pub laws: Vec<Vec<f64>>,
    /// Log of the total weight of all tables with the margin.
    pub log_partition: f64,
    pub states: usize,
}

impl CellMarginals {
    pub fn mean_table(&self) -> Vec<f64> {
        self.laws
            .iter()
            .map(|l| l.iter().enumerate().map(|(v, p)| v as f64 * p).sum())
            .collect()
    }

    pub fn block_mixture(&self, block: &Block) -> Result<EmpiricalLaw> {
        block.check(self.m, self.n)?;
        let size = block.size() as f64;
        EmpiricalLaw::from_weights(block.cells().flat_map(|(i, j)| {
            self.laws[i * self.n + j]
                .iter()
                .enumerate()
                .map(move |(v, &p)| (v as f64, p / size))
        }))
    }
}

/// Column-by-column transfer over the vector of remaining row budgets,
/// giving every cell marginal of the conditional law of an integer table.
/// Works for instances far beyond exhaustive enumeration as long as
/// `∏(r(i)+1) ≤ max_states`.
pub fn conditional_marginals(
    margin: &Margin,
    entry_cap: Option<u32>,
    log_weight: impl Fn(u32) -> f64,
    max_states: usize,
) -> Result<CellMarginals> {
    let (r, c) = margin.integer_parts()?;
    let (m, n) = (r.len(), c.len());
    if r.iter().sum::<u32>() != c.iter().sum::<u32>() {
        return Err(Error::Infeasible("row and column totals differ".into()));
    }
    let mut stride = vec![1usize; m];
    let mut states = 1usize;
    for i in 0..m {
        stride[i] = states;
        states = states
            .checked_mul(r[i] as usize + 1)
            .filter(|&s| s <= max_states)
            .ok_or_else(|| Error::InstanceTooLarge(format!("more than {max_states} budget states")))?;
    }
    let vmax = r.iter().chain(&c).copied().max().unwrap_or(0).min(entry_cap.unwrap_or(u32::MAX));
    let w: Vec<f64> = (0..=vmax).map(|v| log_weight(v).exp()).collect();
    let decode = |s: usize| -> Vec<u32> { (0..m).map(|i| ((s / stride[i]) % (r[i] as usize + 1)) as u32).collect() };
    let start: usize = r.iter().zip(&stride).map(|(&v, &s)| v as usize * s).sum();

    // Forward pass, rescaled per column.
    let mut fwd: Vec<Vec<f64>> = vec![vec![0.0; states]; n + 1];
    let mut fwd_log = vec![0.0; n + 1];
    fwd[0][start] = 1.0;
    for j in 0..n {
        let (head, tail) = fwd.split_at_mut(j + 1);
        let (cur, next) = (&head[j], &mut tail[0]);
        for (s, &f) in cur.iter().enumerate() {
            if f == 0.0 {
                continue;
            }
            let rem = decode(s);
            for_each_column(&rem, c[j], vmax, &w, &stride, &mut |_, wt, delta| {
                next[s - delta] += f * wt;
            });
        }
        let scale = next.iter().copied().fold(0.0, f64::max);
        if scale == 0.0 {
            return Err(Error::Infeasible("no table with the given margin".into()));
        }
        next.iter_mut().for_each(|v| *v /= scale);
        fwd_log[j + 1] = fwd_log[j] + scale.ln();
    }
    if fwd[n][0] == 0.0 {
        return Err(Error::Infeasible("no table with the given margin".into()));
    }
    let log_partition = fwd_log[n] + fwd[n][0].ln();

    // Backward pass.
    let mut bwd: Vec<Vec<f64>> = vec![vec![0.0; states]; n + 1];
    bwd[n][0] = 1.0;
    for j in (0..n).rev() {
        let (head, tail) = bwd.split_at_mut(j + 1);
        let (cur, next) = (&mut head[j], &tail[0]);
        for s in 0..states {
            if fwd[j][s] == 0.0 {
                continue;
            }
            let rem = decode(s);
            let mut acc = 0.0;
            for_each_column(&rem, c[j], vmax, &w, &stride, &mut |_, wt, delta| {
                acc += wt * next[s - delta];
            });
            cur[s] = acc;
        }
        let scale = cur.iter().copied().fold(0.0, f64::max);
        if scale > 0.0 {
            cur.iter_mut().for_each(|v| *v /= scale);
        }
    }

    let mut laws = vec![vec![0.0; vmax as usize + 1]; m * n];
    for j in 0..n {
        let mut acc = vec![vec![0.0; vmax as usize + 1]; m];
        let mut total = 0.0;
        for s in 0..states {
            let f = fwd[j][s];
            if f == 0.0 {
                continue;
            }
            let rem = decode(s);
            for_each_column(&rem, c[j], vmax, &w, &stride, &mut |x, wt, delta| {
                let p = f * wt * bwd[j + 1][s - delta];
                if p > 0.0 {
                    total += p;
                    for (i, &v) in x.iter().enumerate() {
                        acc[i][v as usize] += p;
                    }
                }
            });
        }
        for i in 0..m {
            laws[i * n + j] = acc[i].iter().map(|v| v / total).collect();
        }
    }
    Ok(CellMarginals {
        m,
        n,
        laws,
        log_partition,
        states,
    })
}

/// Calls `f(x, ∏w[x_i], Σ x_i·stride_i)` for every column vector `x ≤ rem`
/// with entries at most `vmax` summing to `total`.
fn for_each_column(
    rem: &[u32],
    total: u32,
    vmax: u32,
    w: &[f64],
    stride: &[usize],
    f: &mut dyn FnMut(&[u32], f64, usize),
) {
    #[allow(clippy::too_many_arguments)]
    fn rec(
        i: usize,
        left: u32,
        rem: &[u32],
        vmax: u32,
        w: &[f64],
        stride: &[usize],
        x: &mut Vec<u32>,
        wt: f64,
        delta: usize,
        capacity: &[u32],
        f: &mut dyn FnMut(&[u32], f64, usize),
    ) {
        if i == rem.len() {
            if left == 0 {
                f(x, wt, delta);
            }
            return;
        }
        if left > capacity[i] {
            return;
        }
        let hi = left.min(rem[i]).min(vmax);
        for v in 0..=hi {
            let wv = w[v as usize];
            if wv == 0.0 {
                continue;
            }
            x.push(v);
            rec(i + 1, left - v, rem, vmax, w, stride, x, wt * wv, delta + v as usize * stride[i], capacity, f);
            x.pop();
        }
    }
    // capacity[i]: most that rows i.. can still absorb.
    let mut capacity = vec![0u32; rem.len() + 1];
    for i in (0..rem.len()).rev() {
        capacity[i] = capacity[i + 1].saturating_add(rem[i].min(vmax));
    }
    let mut x = Vec::with_capacity(rem.len());
    rec(0, total, rem, vmax, w, stride, &mut x, 1.0, 0, &capacity, f);
}

/// Rectangular block of cells `rows × cols`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

impl Block {
    pub fn full(m: usize, n: usize) -> Self {
        Self { rows: 0..m, cols: 0..n }
    }

    pub fn size(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows.clone().flat_map(move |i| self.cols.clone().map(move |j| (i, j)))
    }

    fn check(&self, m: usize, n: usize) -> Result<()> {
        if self.size() == 0 || self.rows.end > m || self.cols.end > n {
            return Err(Error::DimensionMismatch(format!("block {self} does not fit a {m}x{n} table")));
        }
        Ok(())
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{},{}:{}", self.rows.start, self.rows.end, self.cols.start, self.cols.end)
    }
}

impl FromStr for Block {
    type Err = Error;

    /// Parses `i0:i1,j0:j1` (half-open ranges).
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("block `{s}` is not of the form i0:i1,j0:j1"));
        let range = |p: &str| -> Result<Range<usize>> {
            let (a, b) = p.split_once(':').ok_or_else(bad)?;
            let (a, b) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
            if a < b {
                Ok(a..b)
            } else {
                Err(bad())
            }
        };
        let (r, c) = s.split_once(',').ok_or_else(bad)?;
        Ok(Self {
            rows: range(r)?,
            cols: range(c)?,
        })
    }
}

/// Rejection sampling settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RejectionConfig {
    pub count: usize,
    /// L¹ tolerance for both margins; `0` demands an exact match.
    pub rho: f64,
    pub seed: u64,
    pub max_attempts: usize,
    /// Attempts per parallel batch.
    pub batch: usize,
}

impl Default for RejectionConfig {
    fn default() -> Self {
        Self {
            count: 1000,
            rho: 0.0,
            seed: 0,
            max_attempts: 200_000_000,
            batch: 1 << 14,
        }
    }
}

/// Acceptance bookkeeping of a rejection run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RejectionStats {
    pub accepted: usize,
    pub attempts: usize,
    pub rate: f64,
}

/// Acceptance rates below this, after [`STARVATION_PROBE`] attempts, abort.
pub const STARVATION_RATE: f64 = 1e-6;
pub const STARVATION_PROBE: usize = 10_000_000;

/// Draws from the tilted model and keeps tables whose margins are within
/// `rho` in L¹. With `rho = 0` the match must be exact up to rounding, and
/// rows are checked as soon as they are drawn.
pub fn rejection_sample<M: ExponentialFamily + ?Sized>(
    m: &M,
    margin: &Margin,
    p: &Potentials,
    cfg: &RejectionConfig,
) -> Result<(TableEnsemble, RejectionStats)> {
    p.check_domain(m)?;
    let (rows, cols) = (margin.m(), margin.n());
    if p.alpha.len() != rows || p.beta.len() != cols {
        return Err(Error::DimensionMismatch("potentials do not match the margin".into()));
    }
    let exact = cfg.rho == 0.0;
    let tol = 1e-9 * (1.0 + margin.total().abs());
    let attempt = |a: usize| -> Result<Option<Vec<f64>>> {
        let mut t = vec![0.0; rows * cols];
        let mut row_err = 0.0;
        for i in 0..rows {
            let row = &mut t[i * cols..(i + 1) * cols];
            fill_row(m, p, i, row, &mut stream_rng(cfg.seed, a, i))?;
            let e = (row.iter().sum::<f64>() - margin.r()[i]).abs();
            row_err += e;
            if (exact && e > tol) || row_err > cfg.rho + tol {
                return Ok(None);
            }
        }
        let mut col_err = 0.0;
        for j in 0..cols {
            let s: f64 = (0..rows).map(|i| t[i * cols + j]).sum();
            col_err += (s - margin.c()[j]).abs();
        }
        Ok((col_err <= cfg.rho + tol).then_some(t))
    };

    let mut samples = Vec::with_capacity(cfg.count);
    let mut attempts = 0usize;
    while samples.len() < cfg.count {
        if attempts >= cfg.max_attempts {
            return Err(Error::RejectionStarvation {
                rate: samples.len() as f64 / attempts.max(1) as f64,
                attempts,
            });
        }
        let end = (attempts + cfg.batch).min(cfg.max_attempts);
        let got: Vec<Option<Vec<f64>>> = (attempts..end).into_par_iter().map(attempt).collect::<Result<_>>()?;
        for t in got.into_iter().flatten() {
            if samples.len() < cfg.count {
                samples.push(t);
            }
        }
        attempts = end;
        if attempts >= STARVATION_PROBE && (samples.len() as f64) < STARVATION_RATE * attempts as f64 {
            return Err(Error::RejectionStarvation {
                rate: samples.len() as f64 / attempts as f64,
                attempts,
            });
        }
    }
    let stats = RejectionStats {
        accepted: samples.len(),
        attempts,
        rate: samples.len() as f64 / attempts as f64,
    };
    Ok((
        TableEnsemble {
            m: rows,
            n: cols,
            samples,
            seed: cfg.seed,
            origin: Origin::Rejection,
        },
        stats,
    ))
}

/// Constants of the margin concentration bound for the tilted model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationScale {
    /// Realised tameness of the typical table.
    pub delta: f64,
    /// `min{φ(A_δ) − φ(A_{δ/2}), φ(B_{δ/2}) − φ(B_δ)}`.
    pub l_minus: f64,
    /// `sup ψ''` over the tilt range widened by `L⁻` on both sides.
    pub l_plus: f64,
    /// `√(8 L⁺ mn(m+n))`.
    pub rho: f64,
}

/// Computes `L⁻`, `L⁺` and the margin tolerance `ρ*` for the given MLE.
pub fn concentration_scale<M: ExponentialFamily + ?Sized>(m: &M, z: &TypicalTable, p: &Potentials) -> Result<ConcentrationScale> {
    // Any smaller δ is also valid; capping keeps the band finite when the
    // table sits far from every constraint.
    let delta = realized_delta(m, z.z.iter().copied()).min(1.0);
    if !(delta > 0.0) {
        return Err(Error::Domain("typical table touches the support boundary".into()));
    }
    let band = TamenessBand::new(m, delta).ok_or_else(|| Error::Domain(format!("empty band at δ={delta}")))?;
    let half = TamenessBand::new(m, delta / 2.0).ok_or_else(|| Error::Domain(format!("empty band at δ={}", delta / 2.0)))?;
    let (ta, tb) = band.theta_band(m)?;
    let (ha, hb) = half.theta_band(m)?;
    let l_minus = (ta - ha).min(hb - tb);
    let (lo, hi) = p.tilt_range();
    let (_, l_plus) = psi_dd_range(m, lo - l_minus, hi + l_minus, 257);
    let (mf, nf) = (z.m as f64, z.n as f64);
    Ok(ConcentrationScale {
        delta,
        l_minus,
        l_plus,
        rho: (8.0 * l_plus * mf * nf * (mf + nf)).sqrt(),
    })
}

/// Margin deviations of tilted samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluctuationStats {
    pub row_l1: Vec<f64>,
    pub col_l1: Vec<f64>,
    pub mean_row_l1: f64,
    pub mean_col_l1: f64,
    pub scale: Option<ConcentrationScale>,
    /// Fraction of samples with both deviations at most `ρ*`.
    pub within_rho: Option<f64>,
}

/// Samples `Y ~ μ_{α⊕β}` and records `‖r(Y) − r‖₁`, `‖c(Y) − c‖₁`.
pub fn margin_fluctuation<M: ExponentialFamily + ?Sized>(
    m: &M,
    margin: &Margin,
    p: &Potentials,
    samples: usize,
    seed: u64,
) -> Result<FluctuationStats> {
    let ens = sample_model(m, p, samples, seed)?;
    let dev = |got: Vec<f64>, want: &[f64]| got.iter().zip(want).map(|(a, b)| (a - b).abs()).sum::<f64>();
    let row_l1: Vec<f64> = (0..ens.len()).map(|k| dev(ens.row_sums(k), margin.r())).collect();
    let col_l1: Vec<f64> = (0..ens.len()).map(|k| dev(ens.col_sums(k), margin.c())).collect();
    let z = TypicalTable::from_potentials(m, margin, p);
    let scale = concentration_scale(m, &z, p).ok();
    let within_rho = scale.map(|s| {
        row_l1.iter().zip(&col_l1).filter(|(a, b)| **a <= s.rho && **b <= s.rho).count() as f64 / samples.max(1) as f64
    });
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok(FluctuationStats {
        mean_row_l1: mean(&row_l1),
        mean_col_l1: mean(&col_l1),
        row_l1,
        col_l1,
        scale,
        within_rho,
    })
}

/// Cut norm of the step kernel of an `m × n` matrix, with exactness flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutNorm {
    pub value: f64,
    /// `false` when only the greedy lower bound was computed.
    pub exact: bool,
}

/// Largest `2^short · long` handled by exhaustive enumeration.
const CUT_EXACT_WORK: f64 = (1u64 << 30) as f64;

/// `max_{x,y ∈ {0,1}} |xᵀAy| / (mn)`.
///
/// Enumerates subsets of the shorter side in Gray-code order and picks the
/// best subset of the longer side in closed form, which is exact. When that
/// is too expensive, falls back to alternating greedy ascent from several
/// starts and reports a lower bound.
pub fn cut_norm_exact(a: &[f64], m: usize, n: usize) -> Result<CutNorm> {
    if a.len() != m * n {
        return Err(Error::DimensionMismatch(format!("{} entries for a {m}x{n} matrix", a.len())));
    }
    if m == 0 || n == 0 {
        return Ok(CutNorm { value: 0.0, exact: true });
    }
    // Orient so rows are the short side.
    let (p, q, at): (usize, usize, Vec<f64>) = if m <= n {
        (m, n, a.to_vec())
    } else {
        let mut t = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                t[j * m + i] = a[i * n + j];
            }
        }
        (n, m, t)
    };
    let scale = (m * n) as f64;
    if p < 63 && (1u64 << p) as f64 * q as f64 <= CUT_EXACT_WORK {
        let best_y = |v: &[f64]| {
            let (pos, neg) = v.iter().fold((0.0, 0.0), |(pp, nn), &x| if x > 0.0 { (pp + x, nn) } else { (pp, nn - x) });
            pos.max(neg)
        };
        let mut v = vec![0.0; q];
        let mut best = 0.0f64;
        let mut x = 0u64;
        for g in 1u64..(1u64 << p) {
            let bit = g.trailing_zeros() as usize;
            x ^= 1 << bit;
            let row = &at[bit * q..(bit + 1) * q];
            if x >> bit & 1 == 1 {
                v.iter_mut().zip(row).for_each(|(s, r)| *s += r);
            } else {
                v.iter_mut().zip(row).for_each(|(s, r)| *s -= r);
            }
            best = best.max(best_y(&v));
        }
        return Ok(CutNorm {
            value: best / scale,
            exact: true,
        });
    }
    Ok(CutNorm {
        value: cut_norm_greedy(&at, p, q, 16) / scale,
        exact: false,
    })
}

fn cut_norm_greedy(a: &[f64], p: usize, q: usize, restarts: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut best = 0.0f64;
    for start in 0..restarts {
        for sign in [1.0, -1.0] {
            let mut y: Vec<bool> = match start {
                0 => vec![true; q],
                _ => (0..q).map(|_| rng.random::<bool>()).collect(),
            };
            let mut val = f64::NEG_INFINITY;
            for _ in 0..100 {
                let ay: Vec<f64> = (0..p)
                    .map(|i| (0..q).filter(|&j| y[j]).map(|j| sign * a[i * q + j]).sum())
                    .collect();
                let x: Vec<bool> = ay.iter().map(|&s| s > 0.0).collect();
                let xa: Vec<f64> = (0..q)
                    .map(|j| (0..p).filter(|&i| x[i]).map(|i| sign * a[i * q + j]).sum())
                    .collect();
                y = xa.iter().map(|&s| s > 0.0).collect();
                let cur: f64 = xa.iter().filter(|&&s| s > 0.0).sum();
                if cur <= val {
                    break;
                }
                val = cur;
            }
            best = best.max(val);
        }
    }
    best
}

fn diff_table(a: &[f64], z: &[f64]) -> Vec<f64> {
    a.iter().zip(z).map(|(x, y)| x - y).collect()
}

/// Monte Carlo summary of cut distances to the typical table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutExperiment {
    pub m: usize,
    pub n: usize,
    pub distances: Vec<f64>,
    pub mean: f64,
    pub std_err: f64,
    /// Whether every cut norm was computed exactly.
    pub exact: bool,
    /// `E‖W_X − W_Z‖_□` under the exact conditional law, when enumerable.
    #[serde(with = "crate::serde_float::option", default)]
    pub conditional_mean: Option<f64>,
}

/// Solves the margin, draws `samples` tilted tables and records
/// `‖W_Y − W_Z‖_□` for each.
pub fn cut_concentration_experiment<M: ExponentialFamily + ?Sized>(
    m: &M,
    margin: &Margin,
    samples: usize,
    seed: u64,
    cfg: &SolverConfig,
) -> Result<CutExperiment> {
    let sol = solve(m, margin, cfg)?;
    let z = &sol.table;
    let ens = sample_model(m, &sol.potentials, samples, seed)?;
    let norms: Vec<CutNorm> = ens
        .samples
        .par_iter()
        .map(|y| cut_norm_exact(&diff_table(y, &z.z), z.m, z.n))
        .collect::<Result<_>>()?;
    let distances: Vec<f64> = norms.iter().map(|c| c.value).collect();
    let k = distances.len().max(1) as f64;
    let mean = distances.iter().sum::<f64>() / k;
    let var = distances.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (k - 1.0).max(1.0);
    let conditional_mean = if m.is_discrete() && margin.is_integer() {
        enumerate_measure(m, margin, None, EnumLimits::default())
            .ok()
            .map(|law| {
                law.tables
                    .iter()
                    .zip(&law.probs)
                    .map(|(t, p)| p * cut_norm_exact(&diff_table(t, &z.z), z.m, z.n).map_or(f64::NAN, |c| c.value))
                    .sum()
            })
    } else {
        None
    };
    Ok(CutExperiment {
        m: z.m,
        n: z.n,
        mean,
        std_err: (var / k).sqrt(),
        exact: norms.iter().all(|c| c.exact),
        distances,
        conditional_mean,
    })
}

/// [`cut_concentration_experiment`] along the clones `k = 1..=k_max`.
pub fn cut_clone_sequence<M: ExponentialFamily + ?Sized>(
    m: &M,
    base: &Margin,
    k_max: usize,
    samples: usize,
    seed: u64,
    cfg: &SolverConfig,
) -> Result<Vec<CutExperiment>> {
    (1..=k_max)
        .map(|k| cut_concentration_experiment(m, &base.clone_k(k)?, samples, seed.wrapping_add(k as u64), cfg))
        .collect()
}

/// How the conditional law entering a mixture comparison was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MixtureMethod {
    /// Column transfer over budget states (integer-valued measures).
    Transfer,
    /// Exhaustive enumeration of tables.
    Enumeration,
    Rejection { accepted: usize, attempts: usize, rho: f64 },
}

/// Settings of [`mixture_tv_experiment`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureConfig {
    /// Rejection samples when no exact method applies.
    pub samples: usize,
    pub seed: u64,
    /// Equal-probability bins for continuous measures.
    pub bins: usize,
    /// Rejection tolerance; defaults to `ρ*` for continuous measures and
    /// to an exact match for discrete ones.
    pub rho: Option<f64>,
    pub max_states: usize,
    pub limits: EnumLimits,
    /// Skip the exact methods even when they apply.
    pub force_rejection: bool,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            samples: 20_000,
            seed: 0,
            bins: 64,
            rho: None,
            max_states: 1 << 20,
            limits: EnumLimits::default(),
            force_rejection: false,
        }
    }
}

/// Distance between the conditional and tilted block mixtures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureTv {
    pub tv: f64,
    pub block_size: usize,
    pub method: MixtureMethod,
    /// Conditional block mixture (values, or bin indices when binned).
    pub conditional: EmpiricalLaw,
    /// Tilted block mixture on the same support or bins.
    pub tilted: EmpiricalLaw,
}

/// Tilted mixture `μ̃ = (1/|I×J|) Σ μ_{α(i)+β(j)}` as a discrete law, with
/// support extended until the neglected tail is below `1e-14`.
fn tilted_discrete_mixture<M: ExponentialFamily + ?Sized>(m: &M, thetas: &[f64], base_cap: f64) -> Result<EmpiricalLaw> {
    let k = thetas.len() as f64;
    let mut cap = base_cap.max(1.0);
    loop {
        let atoms = m
            .atoms(cap)
            .ok_or_else(|| Error::UnsupportedMeasure(format!("{} is not discrete", m.name())))?;
        let probs: Vec<f64> = atoms
            .iter()
            .map(|&v| thetas.iter().map(|&t| m.pmf(t, v).unwrap_or(0.0)).sum::<f64>() / k)
            .collect();
        let mass: f64 = probs.iter().sum();
        let (_, b) = m.support_bounds();
        if 1.0 - mass <= 1e-14 || cap >= b || cap > 1e7 {
            return EmpiricalLaw::from_weights(atoms.into_iter().zip(probs));
        }
        cap *= 2.0;
    }
}

/// Equal-probability bin edges of the tilted mixture, by bisection on its CDF.
fn equal_probability_edges<M: ExponentialFamily + ?Sized>(m: &M, thetas: &[f64], bins: usize) -> Result<Vec<f64>> {
    let cdf = |x: f64| -> Result<f64> {
        thetas
            .iter()
            .map(|&t| {
                m.cdf(t, x)
                    .ok_or_else(|| Error::UnsupportedMeasure(format!("{} has no closed-form CDF", m.name())))
            })
            .sum::<Result<f64>>()
            .map(|s| s / thetas.len() as f64)
    };
    let mean = thetas.iter().map(|&t| m.psi_prime(t)).sum::<f64>() / thetas.len() as f64;
    let spread = thetas.iter().map(|&t| m.psi_double_prime(t).sqrt()).fold(1e-3, f64::max);
    let mut edges = vec![f64::NEG_INFINITY];
    for b in 1..bins {
        let q = b as f64 / bins as f64;
        let (mut lo, mut hi) = (mean - spread, mean + spread);
        while cdf(lo)? > q {
            lo = mean - 2.0 * (mean - lo);
        }
        while cdf(hi)? < q {
            hi = mean + 2.0 * (hi - mean);
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid)? < q {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-13 * (1.0 + mid.abs()) {
                break;
            }
        }
        edges.push(0.5 * (lo + hi));
    }
    edges.push(f64::INFINITY);
    Ok(edges)
}

/// Compares the law of a uniformly chosen block entry of the conditioned
/// table with the tilted mixture over the same block.
///
/// The conditional law is exact (column transfer or enumeration) whenever
/// the measure is integer-valued or discrete and the instance is small;
/// otherwise it is estimated by rejection from the tilted model.
pub fn mixture_tv_experiment<M: ExponentialFamily + ?Sized>(
    m: &M,
    margin: &Margin,
    block: &Block,
    cfg: &MixtureConfig,
    solver: &SolverConfig,
) -> Result<MixtureTv> {
    block.check(margin.m(), margin.n())?;
    let sol = solve(m, margin, solver)?;
    let p = &sol.potentials;
    let thetas: Vec<f64> = block.cells().map(|(i, j)| p.tilt(i, j)).collect();
    let integer_valued = m.is_discrete() && m.atoms(4.0).is_some_and(|a| a.iter().all(|v| v.fract() == 0.0));
    let top = margin.r().iter().chain(margin.c()).copied().fold(0.0, f64::max);

    if m.is_discrete() && margin.is_integer() && !cfg.force_rejection {
        let exact = if integer_valued {
            conditional_marginals(
                margin,
                None,
                |v| m.log_base_mass(v as f64).unwrap_or(f64::NEG_INFINITY),
                cfg.max_states,
            )
            .and_then(|cm| cm.block_mixture(block))
            .map(|law| (law, MixtureMethod::Transfer))
        } else {
            enumerate_measure(m, margin, None, cfg.limits)
                .and_then(|law| law.block_mixture(block))
                .map(|law| (law, MixtureMethod::Enumeration))
        };
        match exact {
            Ok((conditional, method)) => {
                let tilted = tilted_discrete_mixture(m, &thetas, top)?;
                return Ok(MixtureTv {
                    tv: conditional.tv(&tilted),
                    block_size: block.size(),
                    method,
                    conditional,
                    tilted,
                });
            }
            Err(Error::InstanceTooLarge(_)) => {}
            Err(e) => return Err(e),
        }
    }

    let rho = match cfg.rho {
        Some(r) => r,
        None if m.is_discrete() => 0.0,
        None => concentration_scale(m, &sol.table, p)?.rho,
    };
    let rc = RejectionConfig {
        count: cfg.samples,
        rho,
        seed: cfg.seed,
        ..RejectionConfig::default()
    };
    let (ens, stats) = rejection_sample(m, margin, p, &rc)?;
    let method = MixtureMethod::Rejection {
        accepted: stats.accepted,
        attempts: stats.attempts,
        rho,
    };
    let n = margin.n();
    let values = ens.samples.iter().flat_map(|t| block.cells().map(move |(i, j)| t[i * n + j]));
    if m.is_discrete() {
        let conditional = EmpiricalLaw::from_weights(values.map(|v| (v, 1.0)))?;
        let tilted = tilted_discrete_mixture(m, &thetas, top)?;
        return Ok(MixtureTv {
            tv: conditional.tv(&tilted),
            block_size: block.size(),
            method,
            conditional,
            tilted,
        });
    }
    let edges = equal_probability_edges(m, &thetas, cfg.bins)?;
    let mut counts = vec![0.0; cfg.bins];
    for v in values {
        let b = edges.partition_point(|&e| e <= v).clamp(1, cfg.bins) - 1;
        counts[b] += 1.0;
    }
    let idx: Vec<f64> = (0..cfg.bins).map(|b| b as f64).collect();
    let mut conditional = EmpiricalLaw::from_weights(idx.iter().copied().zip(counts))?;
    conditional.edges = Some(edges.clone());
    let mut tilted = EmpiricalLaw::from_weights(idx.into_iter().map(|b| (b, 1.0)))?;
    tilted.edges = Some(edges);
    Ok(MixtureTv {
        tv: conditional.tv(&tilted),
        block_size: block.size(),
        method,
        conditional,
        tilted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::BaseMeasure;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn margin(r: &[f64], c: &[f64]) -> Margin {
        Margin::new(r.to_vec(), c.to_vec()).unwrap()
    }

    fn law_of(r: &[f64], c: &[f64], m: &BaseMeasure) -> TableLaw {
        enumerate_measure(m, &margin(r, c), None, EnumLimits::default()).unwrap()
    }

    #[test]
    fn two_by_two_unit_margin_has_two_tables() {
        for m in [BaseMeasure::counting(), BaseMeasure::poisson()] {
            let law = law_of(&[1.0, 1.0], &[1.0, 1.0], &m);
            assert_eq!(law.len(), 2);
            for p in &law.probs {
                assert_relative_eq!(*p, 0.5, epsilon = 1e-15);
            }
            assert_relative_eq!(law.cell_law(0, 0).unwrap().prob_of(1.0), 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn one_by_one_is_a_point_mass() {
        let law = law_of(&[2.0], &[2.0], &BaseMeasure::counting());
        assert!(law.is_point_mass());
        assert_eq!(law.tables[0], vec![2.0]);
        assert_eq!(law.probs[0], 1.0);
    }

    #[test]
    fn fisher_yates_small_cases() {
        let fy = fisher_yates_exact(&margin(&[1.0, 1.0], &[1.0, 1.0]), EnumLimits::default()).unwrap();
        assert_eq!(fy.len(), 2);
        fy.probs.iter().for_each(|p| assert_relative_eq!(*p, 0.5, epsilon = 1e-12));

        let fy = fisher_yates_exact(&margin(&[2.0, 0.0], &[1.0, 1.0]), EnumLimits::default()).unwrap();
        assert!(fy.is_point_mass());
        assert_eq!(fy.tables[0], vec![1.0, 1.0, 0.0, 0.0]);
        assert_relative_eq!(fy.probs[0], 1.0, epsilon = 1e-15);

        let fy = fisher_yates_exact(&margin(&[2.0; 3], &[2.0; 3]), EnumLimits::default()).unwrap();
        assert_relative_eq!(fy.mass(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(fy.mean_table()[0], 4.0 / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn oversized_instance_is_rejected() {
        let mg = margin(&[1.0; 5], &[1.0; 5]);
        assert!(matches!(
            enumerate_measure(&BaseMeasure::counting(), &mg, None, EnumLimits::default()),
            Err(Error::InstanceTooLarge(_))
        ));
    }

    #[test]
    fn transfer_matches_enumeration() {
        let mg = margin(&[3.0, 1.0, 2.0], &[2.0, 2.0, 2.0]);
        for m in [BaseMeasure::counting(), BaseMeasure::poisson()] {
            let law = law_of(mg.r(), mg.c(), &m);
            let cm = conditional_marginals(&mg, None, |v| m.log_base_mass(v as f64).unwrap(), 1 << 16).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let a = law.cell_law(i, j).unwrap();
                    let b = EmpiricalLaw::from_weights(cm.laws[i * 3 + j].iter().enumerate().map(|(v, &p)| (v as f64, p))).unwrap();
                    assert!(a.tv(&b) < 1e-12);
                }
            }
            // log-partition equals log Σ weights
            let lz: f64 = law_of(mg.r(), mg.c(), &BaseMeasure::counting()).len() as f64;
            if m == BaseMeasure::counting() {
                assert_relative_eq!(cm.log_partition, lz.ln(), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn three_point_constant_margin_forces_ones() {
        let mg = Margin::constant(4, 1.0).unwrap();
        let law = enumerate_measure(&BaseMeasure::three_point(), &mg, None, EnumLimits::default()).unwrap();
        assert!(law.is_point_mass());
        assert!(law.tables[0].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let m = BaseMeasure::poisson();
        let p = Potentials::new(vec![0.1, -0.3], vec![0.2, 0.0, -0.5]);
        let a = sample_model(&m, &p, 20, 7).unwrap();
        let b = sample_model(&m, &p, 20, 7).unwrap();
        let c = sample_model(&m, &p, 20, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn sampling_rejects_out_of_domain_tilts() {
        let p = Potentials::new(vec![0.5], vec![0.0]);
        assert!(matches!(
            sample_model(&BaseMeasure::counting(), &p, 1, 0),
            Err(Error::TiltOutOfDomain { .. })
        ));
    }

    #[test]
    fn gaussian_constant_margin_entry_mean() {
        let (n, a, count) = (6, 0.7, 4000);
        let mg = Margin::constant(n, a).unwrap();
        let m = BaseMeasure::gaussian();
        let sol = solve(&m, &mg, &SolverConfig::default()).unwrap();
        let ens = sample_model(&m, &sol.potentials, count, 3).unwrap();
        let mean = ens.mean_table().iter().sum::<f64>() / (n * n) as f64;
        assert!((mean - a).abs() < 5.0 / ((count * n * n) as f64).sqrt());
    }

    #[test]
    fn poisson_row_sums_concentrate_on_margin() {
        let mg = margin(&[2.0, 5.0, 3.0], &[4.0, 6.0]);
        let m = BaseMeasure::poisson();
        let sol = solve(&m, &mg, &SolverConfig::default()).unwrap();
        let count = 5000;
        let ens = sample_model(&m, &sol.potentials, count, 11).unwrap();
        for (i, &ri) in mg.r().iter().enumerate() {
            let mean = (0..count).map(|k| ens.row_sums(k)[i]).sum::<f64>() / count as f64;
            assert!((mean - ri).abs() < 5.0 * ri.sqrt() / (count as f64).sqrt());
        }
    }

    #[test]
    fn gaussian_conditional_samples_hit_margin() {
        let mg = margin(&[1.0, -2.0, 4.0], &[0.5, 2.5]);
        let sol = solve(&BaseMeasure::gaussian(), &mg, &SolverConfig::default()).unwrap();
        let ens = sample_gaussian_conditional(&sol.table, 5, 1);
        for k in 0..5 {
            ens.row_sums(k).iter().zip(mg.r()).for_each(|(a, b)| assert_relative_eq!(*a, *b, epsilon = 1e-10));
            ens.col_sums(k).iter().zip(mg.c()).for_each(|(a, b)| assert_relative_eq!(*a, *b, epsilon = 1e-10));
        }
    }

    #[test]
    fn rejection_law_matches_enumeration() {
        let mg = margin(&[2.0, 1.0], &[1.0, 2.0]);
        let m = BaseMeasure::counting();
        let sol = solve(&m, &mg, &SolverConfig::default()).unwrap();
        let count = 20_000;
        let cfg = RejectionConfig {
            count,
            seed: 5,
            ..RejectionConfig::default()
        };
        let (ens, stats) = rejection_sample(&m, &mg, &sol.potentials, &cfg).unwrap();
        assert!(stats.rate > 0.0);
        let emp = TableLaw::from_ensemble(&ens);
        let exact = law_of(mg.r(), mg.c(), &m);
        assert_eq!(emp.len(), exact.len());
        for (t, &p) in exact.tables.iter().zip(&exact.probs) {
            let q = emp.tables.iter().position(|s| s == t).map_or(0.0, |k| emp.probs[k]);
            assert!((q - p).abs() <= 3.0 * (p * (1.0 - p) / count as f64).sqrt());
        }
    }

    #[test]
    fn cut_norm_examples() {
        assert_eq!(cut_norm_exact(&[0.0; 6], 2, 3).unwrap().value, 0.0);
        assert_relative_eq!(cut_norm_exact(&[1.0; 4], 2, 2).unwrap().value, 1.0);
        assert_relative_eq!(cut_norm_exact(&[1.0, -1.0, -1.0, 1.0], 2, 2).unwrap().value, 0.25);
    }

    fn brute_cut(a: &[f64], m: usize, n: usize) -> f64 {
        let mut best = 0.0f64;
        for x in 0u32..(1 << m) {
            for y in 0u32..(1 << n) {
                let mut s = 0.0;
                for i in 0..m {
                    for j in 0..n {
                        if x >> i & 1 == 1 && y >> j & 1 == 1 {
                            s += a[i * n + j];
                        }
                    }
                }
                best = best.max(s.abs());
            }
        }
        best / (m * n) as f64
    }

    #[test]
    fn greedy_is_a_lower_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let exact = cut_norm_exact(&a, 5, 6).unwrap().value;
        let greedy = cut_norm_greedy(&a, 5, 6, 8) / 30.0;
        assert!(greedy <= exact + 1e-12);
        assert!(greedy > 0.0);
    }

    proptest! {
        #[test]
        fn cut_norm_matches_brute_force_and_symmetries(
            (m, n, a) in (1usize..5, 1usize..5).prop_flat_map(|(m, n)| (Just(m), Just(n), prop::collection::vec(-3.0f64..3.0, m * n))),
            g in -4.0f64..4.0,
        ) {
            let c = cut_norm_exact(&a, m, n).unwrap();
            prop_assert!(c.exact);
            prop_assert!((c.value - brute_cut(&a, m, n)).abs() < 1e-12);
            let mut t = vec![0.0; m * n];
            for i in 0..m { for j in 0..n { t[j * m + i] = a[i * n + j]; } }
            prop_assert!((cut_norm_exact(&t, n, m).unwrap().value - c.value).abs() < 1e-12);
            let scaled: Vec<f64> = a.iter().map(|v| g * v).collect();
            prop_assert!((cut_norm_exact(&scaled, m, n).unwrap().value - g.abs() * c.value).abs() < 1e-10);
        }

        #[test]
        fn enumeration_agrees_with_fisher_yates(
            r in prop::collection::vec(0u32..4, 2..4),
            cperm in prop::collection::vec(0u32..4, 2..4),
        ) {
            let total: u32 = r.iter().sum();
            prop_assume!(total > 0 && total <= 8);
            // Build a column vector with the same total from the proposal.
            let mut c = cperm.clone();
            let cs: u32 = c.iter().sum();
            if cs < total { c[0] += total - cs; } else {
                let mut excess = cs - total;
                for v in c.iter_mut() { let d = excess.min(*v); *v -= d; excess -= d; }
            }
            let mg = Margin::new(r.iter().map(|&v| v as f64).collect(), c.iter().map(|&v| v as f64).collect()).unwrap();
            let law = enumerate_measure(&BaseMeasure::poisson(), &mg, None, EnumLimits::default()).unwrap();
            let fy = fisher_yates_exact(&mg, EnumLimits::default()).unwrap();
            prop_assert!(law.tv(&fy) <= 1e-12);
        }
    }

    #[test]
    fn mixture_tv_exact_unit_margin() {
        let mg = margin(&[1.0, 1.0], &[1.0, 1.0]);
        let m = BaseMeasure::counting();
        let res = mixture_tv_experiment(&m, &mg, &Block::full(2, 2), &MixtureConfig::default(), &SolverConfig::default()).unwrap();
        // Conditional mixture is ½δ₀ + ½δ₁; tilted mixture is geometric with mean ½.
        let geo = |v: u32| (2.0 / 3.0) * (1.0f64 / 3.0).powi(v as i32);
        let expected = 0.5 * ((0.5 - geo(0)).abs() + (0.5 - geo(1)).abs() + (1.0 - geo(0) - geo(1)));
        assert_relative_eq!(res.tv, expected, epsilon = 1e-12);
        assert_eq!(res.block_size, 4);
    }

    #[test]
    fn block_parses_and_displays() {
        let b: Block = "0:2,1:3".parse().unwrap();
        assert_eq!(b, Block { rows: 0..2, cols: 1..3 });
        assert_eq!(b.to_string(), "0:2,1:3");
        assert!("2:1,0:1".parse::<Block>().is_err());
    }

    #[test]
    fn gaussian_fluctuation_matches_folded_normal() {
        let n = 8;
        let mg = Margin::constant(n, 0.0).unwrap();
        let p = Potentials::zeros(n, n);
        let st = margin_fluctuation(&BaseMeasure::gaussian(), &mg, &p, 4000, 9).unwrap();
        let want = n as f64 * (2.0 * n as f64 / std::f64::consts::PI).sqrt();
        // Standard error of the mean of a sum of n folded normals.
        let se = (n as f64 * n as f64 * (1.0 - 2.0 / std::f64::consts::PI)).sqrt() / (4000f64).sqrt();
        assert!((st.mean_row_l1 - want).abs() < 4.0 * se);
    }
}
