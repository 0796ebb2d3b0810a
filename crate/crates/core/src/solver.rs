//! Gauss–Seidel block ascent on the dual: marginal, price and drift/vol
//! blocks per timestep, swept forward after a backward message pass.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics;
use crate::dual::{
    add_price_exponent, dual_objective, ensure_down, right_message, update_psi_up, CostParams, DualPotentials,
    DualProblem, MessageCache,
};
use crate::error::{Result, SmotError};
use crate::numerics::LogSumExp;

/// Points whose log-mass falls below this keep their previous potential.
const LOG_MASS_FLOOR: f64 = -700.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Stopping tolerance on `e_max`.
    pub epsilon: f64,
    pub max_sweeps: usize,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub c_mart: f64,
    pub w_price: f64,
    /// Keep interior `φ_ν_k` substituted as `F*(−φ_m_k)` instead of
    /// treating them as free variables constrained from below.
    pub eliminate_phi_nu: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            max_sweeps: 500,
            newton_tol: 1e-10,
            newton_max_iter: 50,
            c_mart: 1e4,
            w_price: 1.0,
            eliminate_phi_nu: false,
        }
    }
}

impl SolverConfig {
    pub fn cost(&self) -> CostParams {
        CostParams {
            c_mart: self.c_mart,
            w_price: self.w_price,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SmotError::InvalidParameter(m.to_string()));
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(self.c_mart >= 0.0) || !self.c_mart.is_finite() {
            return bad("c_mart must be a finite non-negative number");
        }
        if !(self.w_price > 0.0) || !self.w_price.is_finite() {
            return bad("w_price must be positive");
        }
        if !(self.newton_tol > 0.0) || self.newton_max_iter == 0 {
            return bad("Newton tolerance and iteration cap must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub sweep_index: usize,
    /// `‖Φ^{n+1} − Φ^n‖∞ / max(‖Φ^n‖∞, 1)`.
    pub e_max: f64,
    pub dual_value: f64,
    pub price_error_l2: f64,
    pub martingale_error_l2: f64,
    pub wall_time: Duration,
    /// Newton solves that hit the iteration cap during the sweep.
    pub newton_failures: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunStatus {
    Converged,
    MaxSweepsReached,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub potentials: DualPotentials,
    pub cache: MessageCache,
    pub reports: Vec<SweepReport>,
    pub status: RunStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BlockStats {
    pub newton_iterations: usize,
    pub newton_failures: usize,
    pub skipped: usize,
}

impl std::ops::AddAssign for BlockStats {
    fn add_assign(&mut self, o: Self) {
        self.newton_iterations += o.newton_iterations;
        self.newton_failures += o.newton_failures;
        self.skipped += o.skipped;
    }
}

/// Marginal block. At `k = 0` the hard initial constraint gives
/// `φ_ν_0 = log μ₀ − ψ^u_0 − ψ^d_0 − Λ_0·G_0/h` on the support of `μ₀`
/// (off the support `ψ^u_0 = −∞` and the entry is inert, so it is set to 0);
/// interior blocks saturate at `F*(−φ_m_k)` and the last one at 0.
pub fn solve_marginal_block(
    problem: &DualProblem,
    pot: &mut DualPotentials,
    cache: &mut MessageCache,
    k: usize,
    config: &SolverConfig,
) {
    let n = problem.n_steps();
    let dim = problem.dim();
    let cost = config.cost();
    if k == 0 {
        let mut g = vec![0.0; problem.grid_len(0)];
        add_price_exponent(problem, pot, 0, &mut g);
        for (i, v) in pot.phi_nu[0].iter_mut().enumerate() {
            let mu = problem.mu0[i];
            *v = if mu > 0.0 && cache.psi_up[0][i].is_finite() {
                mu.ln() - cache.psi_up[0][i] - cache.psi_down[0][i] - g[i]
            } else {
                0.0
            };
        }
    } else if k < n {
        for (i, v) in pot.phi_nu[k].iter_mut().enumerate() {
            *v = cost.f_star(&pot.phi_m[k][i * dim..(i + 1) * dim]);
        }
    } else {
        pot.phi_nu[n].iter_mut().for_each(|v| *v = 0.0);
    }
    cache.invalidate(k);
    if k < n {
        // ψ^d_k does not involve φ_ν_k.
        cache.down_dirty[k] = false;
    }
}

/// Price block: damped Newton on
/// `f(Λ) = Σ_i (Λ_i c_i − Λ_i²/(2w)) − h·Σ_x exp(A(x) + Λ·G(x)/h)` with
/// `A = ψ^u_k + φ_ν_k + ψ^d_k`. The Hessian uses the raw second moment
/// of `G` under the unnormalised marginal, which is the exact Hessian.
pub fn solve_price_block(
    problem: &DualProblem,
    pot: &mut DualPotentials,
    cache: &mut MessageCache,
    k: usize,
    config: &SolverConfig,
) -> Result<BlockStats> {
    let cons = &problem.constraints[k];
    let m = cons.len();
    let mut stats = BlockStats::default();
    if m == 0 {
        return Ok(stats);
    }
    let n = problem.n_steps();
    let h = problem.h();
    let w = config.w_price;
    let a: Vec<f64> = (0..problem.grid_len(k))
        .map(|i| {
            let d = if k < n { cache.psi_down[k][i] } else { 0.0 };
            cache.psi_up[k][i] + pot.phi_nu[k][i] + d
        })
        .collect();
    let support: Vec<usize> = (0..a.len()).filter(|&i| a[i] > f64::NEG_INFINITY).collect();

    struct Eval {
        f: f64,
        grad: DVector<f64>,
        neg_hess: DMatrix<f64>,
    }
    let evaluate = |lam: &[f64]| -> Eval {
        let e: Vec<f64> = support
            .iter()
            .map(|&i| a[i] + lam.iter().zip(&cons.payoffs).map(|(l, g)| l * g[i]).sum::<f64>() / h)
            .collect();
        let mut lse = LogSumExp::default();
        e.iter().for_each(|v| lse.push(*v));
        let log_z = lse.value();
        let z = log_z.exp();
        let mut first = DVector::<f64>::zeros(m);
        let mut second = DMatrix::<f64>::zeros(m, m);
        for (s, &i) in support.iter().enumerate() {
            let p = (e[s] - log_z).exp();
            if p == 0.0 {
                continue;
            }
            for r in 0..m {
                let gr = cons.payoffs[r][i];
                first[r] += p * gr;
                for c in 0..=r {
                    second[(r, c)] += p * gr * cons.payoffs[c][i];
                }
            }
        }
        let mut f = -h * z;
        let mut grad = DVector::zeros(m);
        let mut neg_hess = DMatrix::zeros(m, m);
        for r in 0..m {
            f += lam[r] * cons.targets[r] - lam[r] * lam[r] / (2.0 * w);
            grad[r] = cons.targets[r] - lam[r] / w - z * first[r];
            for c in 0..=r {
                let v = z * second[(r, c)] / h + if r == c { 1.0 / w } else { 0.0 };
                neg_hess[(r, c)] = v;
                neg_hess[(c, r)] = v;
            }
        }
        Eval { f, grad, neg_hess }
    };

    let mut lam = pot.lambda[k].clone();
    let mut cur = evaluate(&lam);
    let mut converged = false;
    for _ in 0..config.newton_max_iter {
        let gnorm = cur.grad.amax();
        if gnorm <= config.newton_tol {
            converged = true;
            break;
        }
        stats.newton_iterations += 1;
        let step = match cur.neg_hess.clone().cholesky() {
            Some(ch) => ch.solve(&cur.grad),
            None => cur.grad.clone() * w,
        };
        let slope = cur.grad.dot(&step);
        let slack = 1e-15 * (cur.f.abs() + 1.0);
        let mut t = 1.0;
        let mut accepted = None;
        while t > 1e-12 {
            let trial: Vec<f64> = lam.iter().zip(step.iter()).map(|(l, s)| l + t * s).collect();
            let ev = evaluate(&trial);
            if ev.f.is_finite() && ev.f >= cur.f + 1e-4 * t * slope - slack {
                accepted = Some((trial, ev));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((trial, ev)) => {
                lam = trial;
                cur = ev;
            }
            None => break,
        }
    }
    if !converged && cur.grad.amax() <= config.newton_tol {
        converged = true;
    }
    if !converged {
        stats.newton_failures += 1;
    }
    if lam.iter().any(|v| !v.is_finite()) {
        return Err(SmotError::NonFinite("price multipliers"));
    }
    pot.lambda[k] = lam;
    cache.invalidate(k);
    if k < n {
        cache.down_dirty[k] = false;
    }
    Ok(stats)
}

/// Value, gradient and Hessian of
/// `u(φ) = F*(−φ) + log Σ_y exp(φ·B(x,y)/h + r(y)) P̄(x,y)` for one row.
struct RowObjective<'a> {
    log_w: &'a [f64],
    log_norm: f64,
    r: &'a [f64],
    b0: &'a [f64],
    b1: &'a [f64],
    inv_h: f64,
    c_mart: f64,
}

struct RowEval {
    u: f64,
    /// `log Σ_y ...` without the `F*` term.
    l: f64,
    grad: [f64; 2],
    hess: [[f64; 2]; 2],
    mean_b: [f64; 2],
}

impl RowObjective<'_> {
    fn eval(&self, phi: [f64; 2]) -> RowEval {
        let c0 = phi[0] * self.inv_h;
        let c1 = phi[1] * self.inv_h;
        let n = self.log_w.len();
        let mut max = f64::NEG_INFINITY;
        for m in 0..n {
            max = max.max(c0 * self.b0[m] + c1 * self.b1[m] + self.r[m] + self.log_w[m]);
        }
        let (mut s, mut s0, mut s1, mut s00, mut s01, mut s11) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for m in 0..n {
            let (b0, b1) = (self.b0[m], self.b1[m]);
            let e = (c0 * b0 + c1 * b1 + self.r[m] + self.log_w[m] - max).exp();
            s += e;
            s0 += e * b0;
            s1 += e * b1;
            s00 += e * b0 * b0;
            s01 += e * b0 * b1;
            s11 += e * b1 * b1;
        }
        let l = max + s.ln() - self.log_norm;
        let (m0, m1) = (s0 / s, s1 / s);
        let v00 = (s00 / s - m0 * m0).max(0.0);
        let v11 = (s11 / s - m1 * m1).max(0.0);
        let v01 = s01 / s - m0 * m1;
        let ih2 = self.inv_h * self.inv_h;
        let q = if self.c_mart > 0.0 { 1.0 / (2.0 * self.c_mart) } else { 0.0 };
        RowEval {
            u: if self.c_mart > 0.0 {
                (phi[0] * phi[0] + phi[1] * phi[1]) / (4.0 * self.c_mart) + l
            } else {
                l
            },
            l,
            grad: [q * phi[0] + m0 * self.inv_h, q * phi[1] + m1 * self.inv_h],
            hess: [[q + v00 * ih2, v01 * ih2], [v01 * ih2, q + v11 * ih2]],
            mean_b: [m0, m1],
        }
    }
}

struct PointResult {
    phi: [f64; 2],
    l: f64,
    mean_b: [f64; 2],
    iterations: usize,
    failed: bool,
    skipped: bool,
}

/// Minimises the convex row objective. One-dimensional statistics use
/// Newton steps kept inside a sign-change bracket (bisection fallback);
/// two-dimensional ones use backtracking Newton.
fn minimize_row(obj: &RowObjective, phi0: [f64; 2], dim: usize, base: f64, config: &SolverConfig) -> PointResult {
    let mut phi = phi0;
    let mut ev = obj.eval(phi);
    fn out(phi: [f64; 2], ev: &RowEval, iterations: usize, failed: bool, skipped: bool) -> PointResult {
        PointResult {
            phi,
            l: ev.l,
            mean_b: ev.mean_b,
            iterations,
            failed,
            skipped,
        }
    }
    if base + ev.u < LOG_MASS_FLOOR || base == f64::NEG_INFINITY {
        return out(phi, &ev, 0, false, true);
    }
    if obj.c_mart == 0.0 {
        let z = [0.0, 0.0];
        let e = obj.eval(z);
        return out(z, &e, 0, false, false);
    }
    let tol = config.newton_tol;
    if dim == 1 {
        let (bmin, bmax) = obj
            .b0
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        let scale = 2.0 * obj.c_mart * obj.inv_h;
        let (mut lo, mut hi) = (-scale * bmax, -scale * bmin);
        if phi[0] < lo || phi[0] > hi {
            phi[0] = phi[0].clamp(lo, hi);
            ev = obj.eval(phi);
        }
        for it in 0..config.newton_max_iter {
            let g = ev.grad[0];
            if g.abs() <= tol {
                return out(phi, &ev, it, false, false);
            }
            if g > 0.0 {
                hi = phi[0];
            } else {
                lo = phi[0];
            }
            if hi - lo <= 4.0 * f64::EPSILON * (1.0 + phi[0].abs()) {
                return out(phi, &ev, it, false, false);
            }
            let mut next = phi[0] - g / ev.hess[0][0];
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            phi[0] = next;
            ev = obj.eval(phi);
        }
        let failed = ev.grad[0].abs() > tol;
        return out(phi, &ev, config.newton_max_iter, failed, false);
    }
    for it in 0..config.newton_max_iter {
        let g = ev.grad;
        if g[0].abs().max(g[1].abs()) <= tol {
            return out(phi, &ev, it, false, false);
        }
        let [[a, b], [_, d]] = ev.hess;
        let det = a * d - b * b;
        let step = if det > 0.0 {
            [-(d * g[0] - b * g[1]) / det, -(a * g[1] - b * g[0]) / det]
        } else {
            [-g[0] / a.max(1e-300), -g[1] / d.max(1e-300)]
        };
        let slope = step[0] * g[0] + step[1] * g[1];
        let mut t = 1.0;
        let mut moved = false;
        while t > 1e-14 {
            let trial = [phi[0] + t * step[0], phi[1] + t * step[1]];
            let e = obj.eval(trial);
            if e.u <= ev.u + 1e-4 * t * slope + 1e-15 * ev.u.abs() {
                phi = trial;
                ev = e;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            let failed = ev.grad[0].abs().max(ev.grad[1].abs()) > tol;
            return out(phi, &ev, it, failed, false);
        }
    }
    let failed = ev.grad[0].abs().max(ev.grad[1].abs()) > tol;
    out(phi, &ev, config.newton_max_iter, failed, false)
}

/// Drift/vol block at `k < N`, maximising jointly over `(φ_ν_k, φ_m_k)`
/// point by point. Both the initial and the interior blocks reduce to
/// minimising `F*(−φ) + L_x(φ)` with `L_x` the row log-partition; `φ_ν_k`
/// then follows in closed form. Also refreshes `ψ^d_k`.
pub fn solve_driftvol_block(
    problem: &DualProblem,
    pot: &mut DualPotentials,
    cache: &mut MessageCache,
    k: usize,
    config: &SolverConfig,
) -> Result<BlockStats> {
    let n = problem.n_steps();
    assert!(k < n);
    let dim = problem.dim();
    let h = problem.h();
    let kernel = &problem.reference.kernels[k];
    let bt = &problem.b_tables[k];
    let r = right_message(problem, pot, cache, k + 1);
    let mut g = vec![0.0; problem.grid_len(k)];
    add_price_exponent(problem, pot, k, &mut g);
    let phi_m = &pot.phi_m[k];
    let psi_up = &cache.psi_up[k];

    let results: Vec<PointResult> = (0..kernel.n_src())
        .into_par_iter()
        .with_min_len(16)
        .map(|i| {
            let row = kernel.row(i);
            let (b0, b1) = bt.row_slices(row.first_offset, row.len());
            let obj = RowObjective {
                log_w: row.log_w,
                log_norm: row.log_norm,
                r: &r[row.start..row.end()],
                b0,
                b1,
                inv_h: 1.0 / h,
                c_mart: config.c_mart,
            };
            let mut phi0 = [0.0; 2];
            phi0[..dim].copy_from_slice(&phi_m[i * dim..(i + 1) * dim]);
            let base = if k == 0 && problem.mu0[i] == 0.0 {
                f64::NEG_INFINITY
            } else if k == 0 {
                0.0
            } else {
                psi_up[i] + g[i]
            };
            minimize_row(&obj, phi0, dim, base, config)
        })
        .collect();

    let cost = config.cost();
    let mut stats = BlockStats::default();
    for (i, res) in results.iter().enumerate() {
        stats.newton_iterations += res.iterations;
        stats.newton_failures += res.failed as usize;
        stats.skipped += res.skipped as usize;
        if !res.phi[0].is_finite() || !res.phi[1].is_finite() || !res.l.is_finite() {
            return Err(SmotError::NonFinite("drift/vol potential"));
        }
        pot.phi_m[k][i * dim..(i + 1) * dim].copy_from_slice(&res.phi[..dim]);
        let fs = cost.f_star(&res.phi[..dim]);
        pot.phi_nu[k][i] = if k == 0 {
            let mu = problem.mu0[i];
            if mu > 0.0 && cache.psi_up[0][i].is_finite() {
                mu.ln() - cache.psi_up[0][i] - g[i] - res.l
            } else {
                0.0
            }
        } else {
            fs
        };
        cache.psi_down[k][i] = res.l;
        cache.cond_mean_b[k][i * dim..(i + 1) * dim].copy_from_slice(&res.mean_b[..dim]);
    }
    cache.invalidate(k);
    cache.down_dirty[k] = false;
    Ok(stats)
}

/// Gradient of the drift/vol row objective `F*(−φ) + L_x(φ)` at the stored
/// `φ_m_k`, per grid point (`dim` values each, interleaved). Needs clean
/// messages at `k + 1`.
pub fn driftvol_gradient(problem: &DualProblem, pot: &DualPotentials, cache: &MessageCache, k: usize, c_mart: f64) -> Vec<f64> {
    let dim = problem.dim();
    let kernel = &problem.reference.kernels[k];
    let bt = &problem.b_tables[k];
    let r = right_message(problem, pot, cache, k + 1);
    let mut out = Vec::with_capacity(kernel.n_src() * dim);
    for i in 0..kernel.n_src() {
        let row = kernel.row(i);
        let (b0, b1) = bt.row_slices(row.first_offset, row.len());
        let obj = RowObjective {
            log_w: row.log_w,
            log_norm: row.log_norm,
            r: &r[row.start..row.end()],
            b0,
            b1,
            inv_h: 1.0 / problem.h(),
            c_mart,
        };
        let mut phi = [0.0; 2];
        phi[..dim].copy_from_slice(&pot.phi_m[k][i * dim..(i + 1) * dim]);
        out.extend_from_slice(&obj.eval(phi).grad[..dim]);
    }
    out
}

/// One full sweep: backward pass if needed, then blocks for `k = 0..N`
/// with forward message refreshes, then a fresh backward pass for the
/// report (reused by the next sweep).
pub fn sweep(
    problem: &DualProblem,
    pot: &mut DualPotentials,
    cache: &mut MessageCache,
    config: &SolverConfig,
    sweep_index: usize,
) -> Result<SweepReport> {
    let start = Instant::now();
    let n = problem.n_steps();
    let previous = pot.clone();
    ensure_down(problem, pot, cache)?;
    let mut stats = BlockStats::default();
    for k in 0..=n {
        solve_marginal_block(problem, pot, cache, k, config);
        stats += solve_price_block(problem, pot, cache, k, config)?;
        if k < n {
            stats += solve_driftvol_block(problem, pot, cache, k, config)?;
            update_psi_up(problem, pot, cache, k)?;
        }
    }
    let dual_value = dual_objective(problem, pot, cache, &config.cost(), config.eliminate_phi_nu)?;
    ensure_down(problem, pot, cache)?;
    let (price_error_l2, martingale_error_l2) = diagnostics::error_norms(problem, pot, cache);
    let e_max = pot.max_abs_diff(&previous) / previous.sup_norm().max(1.0);
    if !pot.is_finite() {
        return Err(SmotError::NonFinite("potentials"));
    }
    Ok(SweepReport {
        sweep_index,
        e_max,
        dual_value,
        price_error_l2,
        martingale_error_l2,
        wall_time: start.elapsed(),
        newton_failures: stats.newton_failures,
    })
}

/// Plain iteration from zero potentials.
pub fn run(problem: &DualProblem, config: &SolverConfig) -> Result<RunOutcome> {
    run_from(problem, DualPotentials::zeros(problem), config)
}

/// Plain iteration from given potentials until `e_max < ε` or the sweep cap.
pub fn run_from(problem: &DualProblem, init: DualPotentials, config: &SolverConfig) -> Result<RunOutcome> {
    config.validate()?;
    init.check_shapes(problem)?;
    let mut pot = init;
    let mut cache = MessageCache::new(problem);
    let mut reports = Vec::new();
    let mut status = RunStatus::MaxSweepsReached;
    for s in 1..=config.max_sweeps {
        let rep = sweep(problem, &mut pot, &mut cache, config, s)?;
        let done = rep.e_max < config.epsilon;
        reports.push(rep);
        if done {
            status = RunStatus::Converged;
            break;
        }
    }
    Ok(RunOutcome {
        potentials: pot,
        cache,
        reports,
        status,
    })
}
