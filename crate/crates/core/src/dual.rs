//! Dual potentials, forward/backward log-domain messages, marginal and
//! joint densities, and the dual objective.
//!
//! Exponent convention: the optimal path density relative to the
//! reference chain is
//! `exp(Σ_k φ_ν_k(x_k) + Σ_k φ_m_k(x_k)·B(x_k, x_{k+1})/h + Σ_k Λ_k·G_k(x_k)/h)`.
//! With `node_k = φ_ν_k + Λ_k·G_k/h` the messages are
//! `ψ^u_{k+1}(y) = log Σ_x exp(ψ^u_k(x) + node_k(x) + φ_m_k(x)B(x,y)/h) P̄(x,y)` and
//! `ψ^d_k(x) = log Σ_y exp(φ_m_k(x)B(x,y)/h + node_{k+1}(y) + ψ^d_{k+1}(y)) P̄(x,y)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discretization::{ReferenceMeasure, TransitionKernel};
use crate::error::{Result, SmotError};
use crate::market::{payoff, Instrument};
use crate::numerics::LogSumExp;

const PAR_MIN_LEN: usize = 64;

/// Two-timestep statistic whose conditional mean is penalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum StatisticB {
    /// `B(x, y) = 1 − e^{y−x}`; zero conditional mean means `e^X` is a martingale.
    #[default]
    MartingaleExp,
    /// `B(x, y) = (y − x, ½(y − x)²)`.
    DriftVolPair,
}

impl StatisticB {
    pub fn dim(&self) -> usize {
        match self {
            StatisticB::MartingaleExp => 1,
            StatisticB::DriftVolPair => 2,
        }
    }

    /// Components of `B` for a displacement `dy = y − x`; unused slots are 0.
    #[inline]
    pub fn eval(&self, dy: f64) -> [f64; 2] {
        match self {
            StatisticB::MartingaleExp => [-dy.exp_m1(), 0.0],
            StatisticB::DriftVolPair => [dy, 0.5 * dy * dy],
        }
    }
}

/// `Δ_{k,k+1}(φ_m)[x, y] = B(x, y)·φ_m(x)`.
pub fn delta_transition(phi_m_x: &[f64], statistic: StatisticB, x: f64, y: f64) -> f64 {
    let b = statistic.eval(y - x);
    phi_m_x.iter().zip(b).map(|(p, b)| p * b).sum()
}

/// Penalty strengths: `F(b) = c_mart·|b|²` and `C_i(g) = (w_price/2)(g − c_i)²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub c_mart: f64,
    pub w_price: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            c_mart: 1e4,
            w_price: 1.0,
        }
    }
}

impl CostParams {
    /// `F*(p) = |p|²/(4c_mart)`; with `c_mart = 0` it is the indicator of `{0}`.
    #[inline]
    pub fn f_star(&self, p: &[f64]) -> f64 {
        let sq: f64 = p.iter().map(|v| v * v).sum();
        if self.c_mart == 0.0 {
            if sq == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            sq / (4.0 * self.c_mart)
        }
    }

    /// `−C_i*(−Λ) = Λc − Λ²/(2w)`.
    #[inline]
    pub fn price_term(&self, lambda: f64, target: f64) -> f64 {
        lambda * target - lambda * lambda / (2.0 * self.w_price)
    }
}

/// Instruments maturing at one timestep, with payoffs sampled on its grid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaturityConstraints {
    /// Indices into [`DualProblem::instruments`].
    pub instruments: Vec<usize>,
    pub payoffs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

impl MaturityConstraints {
    pub fn len(&self) -> usize {
        self.instruments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instruments.is_empty()
    }
}

/// `B` evaluated on every lattice displacement of a kernel.
#[derive(Debug, Clone)]
pub(crate) struct BTable {
    offset_min: i64,
    b0: Vec<f64>,
    b1: Vec<f64>,
}

impl BTable {
    fn new(kernel: &TransitionKernel, statistic: StatisticB) -> Self {
        let (lo, hi) = kernel.offset_range();
        let (mut b0, mut b1) = (Vec::new(), Vec::new());
        for o in lo..=hi {
            let b = statistic.eval(o as f64 * kernel.dx());
            b0.push(b[0]);
            b1.push(b[1]);
        }
        Self { offset_min: lo, b0, b1 }
    }

    /// Tables aligned with the first destination of a row.
    #[inline]
    pub(crate) fn row_slices(&self, first_offset: i64, len: usize) -> (&[f64], &[f64]) {
        let s = (first_offset - self.offset_min) as usize;
        (&self.b0[s..s + len], &self.b1[s..s + len])
    }

    #[inline]
    fn at(&self, offset: i64) -> (f64, f64) {
        let s = (offset - self.offset_min) as usize;
        (self.b0[s], self.b1[s])
    }
}

/// Reference chain, statistic and price constraints of one calibration.
#[derive(Debug, Clone)]
pub struct DualProblem {
    pub reference: ReferenceMeasure,
    pub statistic: StatisticB,
    pub instruments: Vec<Instrument>,
    /// One entry per timestep, empty where nothing matures.
    pub constraints: Vec<MaturityConstraints>,
    /// Initial law imposed as a hard constraint; equals the reference `ν₀`.
    pub mu0: Vec<f64>,
    pub(crate) b_tables: Vec<BTable>,
}

impl DualProblem {
    pub fn new(reference: ReferenceMeasure, instruments: &[Instrument], statistic: StatisticB) -> Result<Self> {
        let n = reference.n_steps();
        let mut constraints = vec![MaturityConstraints::default(); n + 1];
        for (idx, ins) in instruments.iter().enumerate() {
            if !ins.target_price.is_finite() || !(ins.strike > 0.0) {
                return Err(SmotError::InvalidParameter(format!(
                    "instrument {idx} has strike {} and target {}",
                    ins.strike, ins.target_price
                )));
            }
            let k = reference.time_grid.index_of(ins.maturity)?;
            let grid = &reference.grids[k];
            let c = &mut constraints[k];
            c.instruments.push(idx);
            c.payoffs.push((0..grid.len).map(|i| payoff(ins.kind, ins.strike, grid.x(i))).collect());
            c.targets.push(ins.target_price);
        }
        let b_tables = reference.kernels.iter().map(|k| BTable::new(k, statistic)).collect();
        Ok(Self {
            mu0: reference.nu0.clone(),
            reference,
            statistic,
            instruments: instruments.to_vec(),
            constraints,
            b_tables,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.reference.n_steps()
    }

    pub fn h(&self) -> f64 {
        self.reference.h()
    }

    pub fn dim(&self) -> usize {
        self.statistic.dim()
    }

    pub fn grid_len(&self, k: usize) -> usize {
        self.reference.grids[k].len
    }

    /// Timestep index of each instrument.
    pub fn instrument_steps(&self) -> Vec<usize> {
        let mut out = vec![0; self.instruments.len()];
        for (k, c) in self.constraints.iter().enumerate() {
            for &i in &c.instruments {
                out[i] = k;
            }
        }
        out
    }
}

/// `Φ = ({φ_ν_k}, {φ_m_k}, {Λ_k})`. `phi_m[k]` stores `dim` values per grid
/// point, interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPotentials {
    pub phi_nu: Vec<Vec<f64>>,
    pub phi_m: Vec<Vec<f64>>,
    pub lambda: Vec<Vec<f64>>,
}

impl DualPotentials {
    pub fn zeros(problem: &DualProblem) -> Self {
        let n = problem.n_steps();
        let dim = problem.dim();
        Self {
            phi_nu: (0..=n).map(|k| vec![0.0; problem.grid_len(k)]).collect(),
            phi_m: (0..n).map(|k| vec![0.0; problem.grid_len(k) * dim]).collect(),
            lambda: problem.constraints.iter().map(|c| vec![0.0; c.len()]).collect(),
        }
    }

    fn all_values(&self) -> impl Iterator<Item = &f64> {
        self.phi_nu
            .iter()
            .chain(&self.phi_m)
            .chain(&self.lambda)
            .flat_map(|v| v.iter())
    }

    pub fn sup_norm(&self) -> f64 {
        self.all_values().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.all_values()
            .zip(other.all_values())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.all_values().all(|v| v.is_finite())
    }

    /// Checks that the shapes match `problem`.
    pub fn check_shapes(&self, problem: &DualProblem) -> Result<()> {
        let n = problem.n_steps();
        let dim = problem.dim();
        let ok = self.phi_nu.len() == n + 1
            && self.phi_m.len() == n
            && self.lambda.len() == n + 1
            && (0..=n).all(|k| self.phi_nu[k].len() == problem.grid_len(k))
            && (0..n).all(|k| self.phi_m[k].len() == problem.grid_len(k) * dim)
            && (0..=n).all(|k| self.lambda[k].len() == problem.constraints[k].len());
        if ok {
            Ok(())
        } else {
            Err(SmotError::GridMismatch("potential shapes do not match the problem".into()))
        }
    }

    /// Free variables of the sweep map: all `φ_m` followed by all `Λ`.
    pub fn flatten_free(&self) -> Vec<f64> {
        self.phi_m
            .iter()
            .chain(&self.lambda)
            .flat_map(|v| v.iter().copied())
            .collect()
    }

    pub fn unflatten_free(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for v in self.phi_m.iter_mut().chain(self.lambda.iter_mut()) {
            for x in v.iter_mut() {
                *x = it.next().expect("flat vector too short");
            }
        }
        debug_assert!(it.next().is_none());
    }

    /// Sets every interior `φ_ν_k` to `F*(−φ_m_k)` and the last one to 0,
    /// the values the marginal block would choose.
    pub fn saturate_interior(&mut self, problem: &DualProblem, cost: &CostParams) {
        let n = problem.n_steps();
        let dim = problem.dim();
        for k in 1..n {
            for (i, v) in self.phi_nu[k].iter_mut().enumerate() {
                *v = cost.f_star(&self.phi_m[k][i * dim..(i + 1) * dim]);
            }
        }
        self.phi_nu[n].iter_mut().for_each(|v| *v = 0.0);
    }
}

/// `node_k(x) = φ_ν_k(x) + Λ_k·G_k(x)/h`.
pub fn node_potential(problem: &DualProblem, pot: &DualPotentials, k: usize) -> Vec<f64> {
    let mut out = pot.phi_nu[k].clone();
    add_price_exponent(problem, pot, k, &mut out);
    out
}

/// Adds `Λ_k·G_k(x)/h` in place.
pub fn add_price_exponent(problem: &DualProblem, pot: &DualPotentials, k: usize, out: &mut [f64]) {
    let inv_h = 1.0 / problem.h();
    for (lam, g) in pot.lambda[k].iter().zip(&problem.constraints[k].payoffs) {
        if *lam == 0.0 {
            continue;
        }
        let s = lam * inv_h;
        for (o, gv) in out.iter_mut().zip(g) {
            *o += s * gv;
        }
    }
}

/// Forward and backward messages with per-timestep staleness flags.
#[derive(Debug, Clone)]
pub struct MessageCache {
    pub psi_up: Vec<Vec<f64>>,
    pub psi_down: Vec<Vec<f64>>,
    /// `E_q[B]` under the conditional law of `X_{k+1}` given `X_k = x`,
    /// refreshed together with `ψ^d_k`.
    pub cond_mean_b: Vec<Vec<f64>>,
    pub up_dirty: Vec<bool>,
    pub down_dirty: Vec<bool>,
}

impl MessageCache {
    pub fn new(problem: &DualProblem) -> Self {
        let n = problem.n_steps();
        let dim = problem.dim();
        let mut psi_up: Vec<Vec<f64>> = (0..=n).map(|k| vec![0.0; problem.grid_len(k)]).collect();
        psi_up[0] = problem.reference.nu0.iter().map(|p| p.ln()).collect();
        let mut up_dirty = vec![true; n + 1];
        up_dirty[0] = false;
        let mut down_dirty = vec![true; n + 1];
        down_dirty[n] = false;
        Self {
            psi_up,
            psi_down: (0..=n).map(|k| vec![0.0; problem.grid_len(k)]).collect(),
            cond_mean_b: (0..n).map(|k| vec![0.0; problem.grid_len(k) * dim]).collect(),
            up_dirty,
            down_dirty,
        }
    }

    /// Marks every message that depends on the potentials at timestep `k`
    /// (`ψ^d_k` depends on `φ_m_k`).
    pub fn invalidate(&mut self, k: usize) {
        let n = self.up_dirty.len() - 1;
        for d in &mut self.up_dirty[k + 1..] {
            *d = true;
        }
        for d in &mut self.down_dirty[..k.min(n - 1) + 1] {
            *d = true;
        }
    }

    pub fn invalidate_all(&mut self) {
        let n = self.up_dirty.len() - 1;
        self.up_dirty[1..].iter_mut().for_each(|d| *d = true);
        self.down_dirty[..n].iter_mut().for_each(|d| *d = true);
    }

    pub fn up_clean(&self) -> bool {
        !self.up_dirty.iter().any(|&d| d)
    }

    pub fn down_clean(&self) -> bool {
        !self.down_dirty.iter().any(|&d| d)
    }
}

/// Computes `ψ^u_{k+1}` from `ψ^u_k`, gathering over the sources of each
/// destination with the column maximum subtracted before exponentiation.
pub fn update_psi_up(problem: &DualProblem, pot: &DualPotentials, cache: &mut MessageCache, k: usize) -> Result<()> {
    let kernel = &problem.reference.kernels[k];
    let bt = &problem.b_tables[k];
    let dim = problem.dim();
    let inv_h = 1.0 / problem.h();
    let mut u = node_potential(problem, pot, k);
    for (v, p) in u.iter_mut().zip(&cache.psi_up[k]) {
        *v += p;
    }
    for (i, v) in u.iter_mut().enumerate() {
        *v -= kernel.row(i).log_norm;
    }
    let phi_m = &pot.phi_m[k];
    let coef = |i: usize| -> (f64, f64) {
        let c0 = phi_m[i * dim] * inv_h;
        let c1 = if dim == 2 { phi_m[i * dim + 1] * inv_h } else { 0.0 };
        (c0, c1)
    };
    let value = |i: usize, j: usize| -> Option<f64> {
        let row = kernel.row(i);
        if j < row.start || j >= row.end() || u[i] == f64::NEG_INFINITY {
            return None;
        }
        let (b0, b1) = bt.at(kernel.offset(i, j));
        let (c0, c1) = coef(i);
        Some(u[i] + c0 * b0 + c1 * b1 + row.log_w[j - row.start])
    };
    let out: Vec<f64> = (0..kernel.n_dst())
        .into_par_iter()
        .with_min_len(PAR_MIN_LEN)
        .map(|j| {
            let range = kernel.source_range(j);
            let mut max = f64::NEG_INFINITY;
            for i in range.clone() {
                if let Some(v) = value(i, j) {
                    max = max.max(v);
                }
            }
            if max == f64::NEG_INFINITY {
                return max;
            }
            let mut s = 0.0;
            for i in range {
                if let Some(v) = value(i, j) {
                    s += (v - max).exp();
                }
            }
            max + s.ln()
        })
        .collect();
    if out.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(SmotError::NonFiniteMessage { timestep: k + 1 });
    }
    cache.psi_up[k + 1] = out;
    cache.up_dirty[k + 1] = false;
    Ok(())
}

/// Log-sum-exp over one kernel row of `coef·B(o)/h + r[y] + log P̄(x, y)`,
/// returning the value and `E_q[B]` under the normalised weights.
#[inline]
pub(crate) fn row_contraction(
    log_w: &[f64],
    log_norm: f64,
    r: &[f64],
    b0: &[f64],
    b1: &[f64],
    c0: f64,
    c1: f64,
) -> (f64, f64, f64) {
    let mut max = f64::NEG_INFINITY;
    for m in 0..log_w.len() {
        max = max.max(c0 * b0[m] + c1 * b1[m] + r[m] + log_w[m]);
    }
    if max == f64::NEG_INFINITY {
        return (max, 0.0, 0.0);
    }
    let (mut s, mut s0, mut s1) = (0.0, 0.0, 0.0);
    for m in 0..log_w.len() {
        let e = (c0 * b0[m] + c1 * b1[m] + r[m] + log_w[m] - max).exp();
        s += e;
        s0 += e * b0[m];
        s1 += e * b1[m];
    }
    (max + s.ln() - log_norm, s0 / s, s1 / s)
}

/// `R_k = node_k + ψ^d_k`, the right-hand message entering row contractions.
pub fn right_message(problem: &DualProblem, pot: &DualPotentials, cache: &MessageCache, k: usize) -> Vec<f64> {
    let mut r = node_potential(problem, pot, k);
    for (v, d) in r.iter_mut().zip(&cache.psi_down[k]) {
        *v += d;
    }
    r
}

/// Computes `ψ^d_{k−1}` from `ψ^d_k` (and the conditional means of `B`
/// at timestep `k − 1`).
pub fn update_psi_down(problem: &DualProblem, pot: &DualPotentials, cache: &mut MessageCache, k: usize) -> Result<()> {
    assert!(k >= 1, "ψ^d_{{k-1}} needs k >= 1");
    let src = k - 1;
    let kernel = &problem.reference.kernels[src];
    let bt = &problem.b_tables[src];
    let dim = problem.dim();
    let inv_h = 1.0 / problem.h();
    let r = right_message(problem, pot, cache, k);
    let phi_m = &pot.phi_m[src];
    let rows: Vec<(f64, f64, f64)> = (0..kernel.n_src())
        .into_par_iter()
        .with_min_len(PAR_MIN_LEN)
        .map(|i| {
            let row = kernel.row(i);
            let (b0, b1) = bt.row_slices(row.first_offset, row.len());
            let c0 = phi_m[i * dim] * inv_h;
            let c1 = if dim == 2 { phi_m[i * dim + 1] * inv_h } else { 0.0 };
            row_contraction(row.log_w, row.log_norm, &r[row.start..row.end()], b0, b1, c0, c1)
        })
        .collect();
    if rows.iter().any(|v| !v.0.is_finite()) {
        return Err(SmotError::NonFiniteMessage { timestep: src });
    }
    let cm = &mut cache.cond_mean_b[src];
    for (i, (psi, m0, m1)) in rows.iter().enumerate() {
        cache.psi_down[src][i] = *psi;
        cm[i * dim] = *m0;
        if dim == 2 {
            cm[i * dim + 1] = *m1;
        }
    }
    cache.down_dirty[src] = false;
    Ok(())
}

/// Recomputes every stale forward message.
pub fn ensure_up(problem: &DualProblem, pot: &DualPotentials, cache: &mut MessageCache) -> Result<()> {
    for k in 0..problem.n_steps() {
        if cache.up_dirty[k + 1] {
            update_psi_up(problem, pot, cache, k)?;
            if k + 2 <= problem.n_steps() {
                cache.up_dirty[k + 2] = true;
            }
        }
    }
    Ok(())
}

/// Recomputes every stale backward message.
pub fn ensure_down(problem: &DualProblem, pot: &DualPotentials, cache: &mut MessageCache) -> Result<()> {
    for k in (1..=problem.n_steps()).rev() {
        if cache.down_dirty[k - 1] {
            update_psi_down(problem, pot, cache, k)?;
            if k >= 2 {
                cache.down_dirty[k - 2] = true;
            }
        }
    }
    Ok(())
}

/// Full backward pass, regardless of the staleness flags.
pub fn backward_pass(problem: &DualProblem, pot: &DualPotentials, cache: &mut MessageCache) -> Result<()> {
    for k in (1..=problem.n_steps()).rev() {
        update_psi_down(problem, pot, cache, k)?;
    }
    Ok(())
}

/// Full forward pass, regardless of the staleness flags.
pub fn forward_pass(problem: &DualProblem, pot: &DualPotentials, cache: &mut MessageCache) -> Result<()> {
    for k in 0..problem.n_steps() {
        update_psi_up(problem, pot, cache, k)?;
    }
    Ok(())
}

/// `ν_k(x) = exp(ψ^u_k + φ_ν_k + Λ_k·G_k/h + ψ^d_k)`; unnormalised away
/// from the optimum.
pub fn marginal_density(problem: &DualProblem, pot: &DualPotentials, cache: &MessageCache, k: usize) -> Vec<f64> {
    let node = node_potential(problem, pot, k);
    node.iter()
        .zip(&cache.psi_up[k])
        .zip(&cache.psi_down[k])
        .map(|((n, u), d)| (u + n + d).exp())
        .collect()
}

/// Banded matrix stored row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedMatrix {
    pub n_cols: usize,
    pub rows: Vec<BandRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandRow {
    pub start: usize,
    pub values: Vec<f64>,
}

impl BandedMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = &self.rows[i];
        if j >= r.start && j < r.start + r.values.len() {
            r.values[j - r.start]
        } else {
            0.0
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.values.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols];
        for r in &self.rows {
            for (m, v) in r.values.iter().enumerate() {
                out[r.start + m] += v;
            }
        }
        out
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.n_rows())
            .map(|i| (0..self.n_cols).map(|j| self.get(i, j)).collect())
            .collect()
    }
}

fn row_log_terms(
    problem: &DualProblem,
    pot: &DualPotentials,
    r: &[f64],
    k: usize,
    i: usize,
) -> (usize, Vec<f64>) {
    let kernel = &problem.reference.kernels[k];
    let bt = &problem.b_tables[k];
    let dim = problem.dim();
    let inv_h = 1.0 / problem.h();
    let row = kernel.row(i);
    let (b0, b1) = bt.row_slices(row.first_offset, row.len());
    let c0 = pot.phi_m[k][i * dim] * inv_h;
    let c1 = if dim == 2 { pot.phi_m[k][i * dim + 1] * inv_h } else { 0.0 };
    let terms = (0..row.len())
        .map(|m| c0 * b0[m] + c1 * b1[m] + r[row.start + m] + row.log_w[m] - row.log_norm)
        .collect();
    (row.start, terms)
}

/// Joint law of `(X_k, X_{k+1})` on the kernel band.
pub fn joint_density(problem: &DualProblem, pot: &DualPotentials, cache: &MessageCache, k: usize) -> BandedMatrix {
    let r = right_message(problem, pot, cache, k + 1);
    let mut left = node_potential(problem, pot, k);
    for (v, u) in left.iter_mut().zip(&cache.psi_up[k]) {
        *v += u;
    }
    let rows = (0..problem.grid_len(k))
        .into_par_iter()
        .with_min_len(PAR_MIN_LEN)
        .map(|i| {
            let (start, terms) = row_log_terms(problem, pot, &r, k, i);
            let values = terms.iter().map(|t| (left[i] + t).exp()).collect();
            BandRow { start, values }
        })
        .collect();
    BandedMatrix {
        n_cols: problem.grid_len(k + 1),
        rows,
    }
}

/// Conditional law of `X_{k+1}` given `X_k`: joint rows normalised to 1.
/// Does not depend on the forward messages.
pub fn conditional_kernel(problem: &DualProblem, pot: &DualPotentials, cache: &MessageCache, k: usize) -> BandedMatrix {
    let r = right_message(problem, pot, cache, k + 1);
    let rows = (0..problem.grid_len(k))
        .into_par_iter()
        .with_min_len(PAR_MIN_LEN)
        .map(|i| {
            let (start, terms) = row_log_terms(problem, pot, &r, k, i);
            let mut lse = LogSumExp::default();
            terms.iter().for_each(|t| lse.push(*t));
            let z = lse.value();
            let values = terms.iter().map(|t| (t - z).exp()).collect();
            BandRow { start, values }
        })
        .collect();
    BandedMatrix {
        n_cols: problem.grid_len(k + 1),
        rows,
    }
}

/// `log Σ_paths exp(ΔΦ/h)·P̄`, from the last forward message.
pub fn log_path_mass(problem: &DualProblem, pot: &DualPotentials, cache: &MessageCache) -> f64 {
    let n = problem.n_steps();
    let node = node_potential(problem, pot, n);
    let mut lse = LogSumExp::default();
    for (u, v) in cache.psi_up[n].iter().zip(&node) {
        lse.push(u + v);
    }
    lse.value()
}

pub fn path_mass(problem: &DualProblem, pot: &DualPotentials, cache: &MessageCache) -> f64 {
    log_path_mass(problem, pot, cache).exp()
}

fn price_terms(problem: &DualProblem, pot: &DualPotentials, cost: &CostParams) -> f64 {
    problem
        .constraints
        .iter()
        .zip(&pot.lambda)
        .flat_map(|(c, l)| c.targets.iter().zip(l))
        .map(|(t, l)| cost.price_term(*l, *t))
        .sum()
}

/// Dual objective
/// `h·Σ μ₀(φ_ν_0 − F*(−φ_m_0)) + Σ_i (Λ_i c_i − Λ_i²/(2w)) − h·Z`.
///
/// In explicit mode the interior constraints `φ_ν_k ≥ F*(−φ_m_k)` and
/// `φ_ν_N ≥ 0` are checked and a violation yields `−∞`; with
/// `eliminate_phi_nu` the stored interior values are taken as given.
/// Requires clean forward messages.
pub fn dual_objective(
    problem: &DualProblem,
    pot: &DualPotentials,
    cache: &MessageCache,
    cost: &CostParams,
    eliminate_phi_nu: bool,
) -> Result<f64> {
    if !cache.up_clean() {
        return Err(SmotError::InvalidParameter("dual objective needs clean forward messages".into()));
    }
    let h = problem.h();
    let n = problem.n_steps();
    let dim = problem.dim();
    if !eliminate_phi_nu && !interior_feasible(problem, pot, cost) {
        return Ok(f64::NEG_INFINITY);
    }
    let mut initial = 0.0;
    for (i, &mu) in problem.mu0.iter().enumerate() {
        if mu > 0.0 {
            let fs = if n > 0 {
                let neg: Vec<f64> = pot.phi_m[0][i * dim..(i + 1) * dim].iter().map(|v| -v).collect();
                cost.f_star(&neg)
            } else {
                0.0
            };
            initial += mu * (pot.phi_nu[0][i] - fs);
        }
    }
    let value = h * initial + price_terms(problem, pot, cost) - h * path_mass(problem, pot, cache);
    if value.is_nan() {
        return Err(SmotError::NonFinite("dual objective"));
    }
    Ok(value)
}

/// Whether the interior marginal potentials satisfy their conjugate constraints.
pub fn interior_feasible(problem: &DualProblem, pot: &DualPotentials, cost: &CostParams) -> bool {
    let n = problem.n_steps();
    let dim = problem.dim();
    for k in 1..n {
        for (i, &v) in pot.phi_nu[k].iter().enumerate() {
            let fs = cost.f_star(&pot.phi_m[k][i * dim..(i + 1) * dim]);
            if v < fs - 1e-12 * (1.0 + fs.abs()) {
                return false;
            }
        }
    }
    pot.phi_nu[n].iter().all(|&v| v >= -1e-12)
}

/// Dual objective with `φ_ν_0` maximised in closed form, interior `φ_ν`
/// saturated and `φ_ν_N = 0`. Requires a clean `ψ^d_0` computed from the
/// stored (saturated) potentials.
pub fn reduced_dual_objective(
    problem: &DualProblem,
    pot: &DualPotentials,
    cache: &MessageCache,
    cost: &CostParams,
) -> Result<f64> {
    if cache.down_dirty[0] {
        return Err(SmotError::InvalidParameter("reduced dual needs a clean backward pass".into()));
    }
    let h = problem.h();
    let dim = problem.dim();
    let n = problem.n_steps();
    let mut g0 = vec![0.0; problem.grid_len(0)];
    add_price_exponent(problem, pot, 0, &mut g0);
    let mut s = 0.0;
    let mut mass = 0.0;
    for (i, &mu) in problem.mu0.iter().enumerate() {
        if mu > 0.0 {
            let fs = if n > 0 {
                let neg: Vec<f64> = pot.phi_m[0][i * dim..(i + 1) * dim].iter().map(|v| -v).collect();
                cost.f_star(&neg)
            } else {
                0.0
            };
            s += mu * (mu.ln() - cache.psi_up[0][i] - cache.psi_down[0][i] - g0[i] - fs);
            mass += mu;
        }
    }
    let value = h * s + price_terms(problem, pot, cost) - h * mass;
    if value.is_nan() {
        return Err(SmotError::NonFinite("reduced dual objective"));
    }
    Ok(value)
}
