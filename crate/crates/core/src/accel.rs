//! Anderson acceleration of the sweep map and coarse-to-fine warm starts.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::diagnostics::{extract_characteristics, local_vol_surface};
use crate::discretization::{ReferenceDrift, ReferenceMeasure, ReferenceSpec, ReferenceVol, SpatialGrid};
use crate::dual::{ensure_down, reduced_dual_objective, DualPotentials, DualProblem, MessageCache, StatisticB};
use crate::error::{Result, SmotError};
use crate::market::Instrument;
use crate::solver::{sweep, RunOutcome, RunStatus, SolverConfig};

/// Type-II Anderson mixing over the last `depth` iterates and residuals.
#[derive(Debug, Clone)]
pub struct AndersonState {
    depth: usize,
    regularization: f64,
    iterates: VecDeque<Vec<f64>>,
    residuals: VecDeque<Vec<f64>>,
}

impl AndersonState {
    pub fn new(depth: usize) -> Self {
        Self::with_regularization(depth, 1e-10)
    }

    pub fn with_regularization(depth: usize, regularization: f64) -> Self {
        Self {
            depth: depth.max(1),
            regularization,
            iterates: VecDeque::new(),
            residuals: VecDeque::new(),
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn history_len(&self) -> usize {
        self.iterates.len()
    }

    pub fn reset(&mut self) {
        self.iterates.clear();
        self.residuals.clear();
    }

    /// Records `g_n = s(x_n)` with residual `f_n = g_n − x_n` and returns
    /// `g_n − ΔG·γ`, where `γ` minimises `‖f_n − ΔF·γ‖² + reg·scale·‖γ‖²`
    /// over the stored differences. Falls back to `g_n` (clearing the
    /// history) when the extrapolation is not finite.
    pub fn step(&mut self, iterate: &[f64], residual: &[f64]) -> Vec<f64> {
        self.iterates.push_back(iterate.to_vec());
        self.residuals.push_back(residual.to_vec());
        while self.iterates.len() > self.depth {
            self.iterates.pop_front();
            self.residuals.pop_front();
        }
        let m = self.iterates.len() - 1;
        if m == 0 {
            return iterate.to_vec();
        }
        let dim = iterate.len();
        let mut df = DMatrix::<f64>::zeros(dim, m);
        for j in 0..m {
            let (a, b) = (&self.residuals[j], &self.residuals[j + 1]);
            for i in 0..dim {
                df[(i, j)] = b[i] - a[i];
            }
        }
        let f = DVector::from_column_slice(residual);
        let mut normal = df.transpose() * &df;
        let scale = (0..m).map(|j| normal[(j, j)]).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        for j in 0..m {
            normal[(j, j)] += self.regularization * scale;
        }
        let rhs = df.transpose() * f;
        let gamma = match normal.cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => {
                self.reset();
                return iterate.to_vec();
            }
        };
        let mut out = iterate.to_vec();
        for j in 0..m {
            let (a, b) = (&self.iterates[j], &self.iterates[j + 1]);
            let gj = gamma[j];
            for i in 0..dim {
                out[i] -= gj * (b[i] - a[i]);
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            self.reset();
            return iterate.to_vec();
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccelStats {
    pub accepted: usize,
    pub rejected: usize,
}

/// Sweeps with Anderson extrapolation of `(φ_m, Λ)`. An extrapolated
/// point is kept only if its dual value, with `φ_ν_0` optimised and the
/// interior `φ_ν` saturated, is at least that of the plain iterate;
/// otherwise the plain iterate is used and the history cleared.
pub fn run_accelerated(
    problem: &DualProblem,
    init: DualPotentials,
    config: &SolverConfig,
    depth: usize,
) -> Result<(RunOutcome, AccelStats)> {
    config.validate()?;
    init.check_shapes(problem)?;
    let cost = config.cost();
    let mut pot = init;
    let mut cache = MessageCache::new(problem);
    let mut state = AndersonState::new(depth);
    let mut stats = AccelStats::default();
    let mut reports = Vec::new();
    let mut status = RunStatus::MaxSweepsReached;
    for s in 1..=config.max_sweeps {
        let x = pot.flatten_free();
        let rep = sweep(problem, &mut pot, &mut cache, config, s)?;
        let done = rep.e_max < config.epsilon;
        reports.push(rep);
        if done {
            status = RunStatus::Converged;
            break;
        }
        if depth <= 1 {
            continue;
        }
        let g = pot.flatten_free();
        let f: Vec<f64> = g.iter().zip(&x).map(|(a, b)| a - b).collect();
        let acc = state.step(&g, &f);
        if acc == g {
            continue;
        }
        let mut cand = pot.clone();
        cand.unflatten_free(&acc);
        cand.saturate_interior(problem, &cost);
        let mut cand_cache = cache.clone();
        cand_cache.invalidate_all();
        let accept = cand.is_finite()
            && ensure_down(problem, &cand, &mut cand_cache).is_ok()
            && match (
                reduced_dual_objective(problem, &cand, &cand_cache, &cost),
                reduced_dual_objective(problem, &pot, &cache, &cost),
            ) {
                (Ok(a), Ok(p)) => a.is_finite() && a >= p,
                _ => false,
            };
        if accept {
            pot = cand;
            cache = cand_cache;
            stats.accepted += 1;
        } else {
            state.reset();
            stats.rejected += 1;
        }
    }
    Ok((
        RunOutcome {
            potentials: pot,
            cache,
            reports,
            status,
        },
        stats,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum RefineMode {
    #[default]
    InterpolatePotentials,
    RebuildReference,
}

/// Increasing numbers of time points, one calibration per level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiscaleSchedule {
    pub levels: Vec<usize>,
    pub refine_mode: RefineMode,
}

impl MultiscaleSchedule {
    pub fn new(levels: Vec<usize>, refine_mode: RefineMode) -> Result<Self> {
        if levels.is_empty() || levels[0] < 2 || levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SmotError::InvalidParameter(format!(
                "schedule must be an increasing list of time-point counts >= 2, got {levels:?}"
            )));
        }
        Ok(Self { levels, refine_mode })
    }

    /// `{11, 21, 41, 81}`: every level holds the maturities `0.2, …, 1.0`.
    pub fn default_levels() -> Vec<usize> {
        vec![11, 21, 41, 81]
    }

    /// Number of timesteps of each level.
    pub fn steps(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l - 1).collect()
    }
}

/// Linear interpolation weights of fine timestep `j` on the coarse time grid.
fn time_weights(j: usize, n_fine: usize, n_coarse: usize, last: usize) -> (usize, usize, f64) {
    let num = j * n_coarse;
    let k0 = (num / n_fine).min(last);
    let w = if k0 == last { 0.0 } else { (num % n_fine) as f64 / n_fine as f64 };
    (k0, (k0 + 1).min(last), w)
}

/// Value at fine point `x` of a field on `grid`, linear in `x` and
/// clamped at the ends; `stride`/`comp` select one interleaved component.
fn sample(grid: &SpatialGrid, values: &[f64], stride: usize, comp: usize, x: f64) -> f64 {
    let u = ((x - grid.x(0)) / grid.dx).clamp(0.0, (grid.len - 1) as f64);
    if grid.len == 1 {
        return values[comp];
    }
    // Lattice points shared by both grids are copied exactly.
    let r = u.round();
    if (u - r).abs() < 1e-9 {
        return values[r as usize * stride + comp];
    }
    let i = (u.floor() as usize).min(grid.len - 2);
    let w = u - i as f64;
    values[i * stride + comp] * (1.0 - w) + values[(i + 1) * stride + comp] * w
}

/// Interpolates coarse potentials onto the fine problem: piecewise linear
/// in `t` and in `x`, `Λ` copied per instrument.
pub fn interpolate_potentials(coarse: &DualProblem, pot: &DualPotentials, fine: &DualProblem) -> Result<DualPotentials> {
    pot.check_shapes(coarse)?;
    if coarse.statistic != fine.statistic || coarse.instruments != fine.instruments {
        return Err(SmotError::GridMismatch("levels differ in statistic or instruments".into()));
    }
    if (coarse.reference.time_grid.horizon - fine.reference.time_grid.horizon).abs() > 1e-12 {
        return Err(SmotError::GridMismatch("levels have different horizons".into()));
    }
    let (nc, nf) = (coarse.n_steps(), fine.n_steps());
    let dim = fine.dim();
    let mut out = DualPotentials::zeros(fine);
    let cg = &coarse.reference.grids;
    let fg = &fine.reference.grids;
    for j in 0..=nf {
        let (a, b, w) = time_weights(j, nf, nc, nc);
        for i in 0..fg[j].len {
            let x = fg[j].x(i);
            out.phi_nu[j][i] =
                sample(&cg[a], &pot.phi_nu[a], 1, 0, x) * (1.0 - w) + sample(&cg[b], &pot.phi_nu[b], 1, 0, x) * w;
        }
    }
    for j in 0..nf {
        let (a, b, w) = time_weights(j, nf, nc, nc - 1);
        for i in 0..fg[j].len {
            let x = fg[j].x(i);
            for c in 0..dim {
                out.phi_m[j][i * dim + c] = sample(&cg[a], &pot.phi_m[a], dim, c, x) * (1.0 - w)
                    + sample(&cg[b], &pot.phi_m[b], dim, c, x) * w;
            }
        }
    }
    let mut lambda_of = vec![0.0; coarse.instruments.len()];
    for (k, cons) in coarse.constraints.iter().enumerate() {
        for (p, &idx) in cons.instruments.iter().enumerate() {
            lambda_of[idx] = pot.lambda[k][p];
        }
    }
    for (k, cons) in fine.constraints.iter().enumerate() {
        for (p, &idx) in cons.instruments.iter().enumerate() {
            out.lambda[k][p] = lambda_of[idx];
        }
    }
    Ok(out)
}

/// Starting point of the next level: either the fine problem on the
/// original reference with interpolated potentials, or a problem whose
/// reference volatility is the local vol extracted from the coarse
/// solution, started from zero potentials.
pub fn refine_level(
    coarse: &DualProblem,
    pot: &DualPotentials,
    cache: &MessageCache,
    fine_spec: &ReferenceSpec,
    mode: RefineMode,
) -> Result<(DualProblem, DualPotentials)> {
    match mode {
        RefineMode::InterpolatePotentials => {
            let fine = DualProblem::new(ReferenceMeasure::build(fine_spec)?, &coarse.instruments, coarse.statistic)?;
            let init = interpolate_potentials(coarse, pot, &fine)?;
            Ok((fine, init))
        }
        RefineMode::RebuildReference => {
            let ch = extract_characteristics(coarse, pot, cache);
            let surface = local_vol_surface(&ch, &coarse.reference.grids, coarse.h());
            let base = fine_spec.ref_vol.min_at(0.0);
            let vol = surface.to_vol_surface(0.5 * base, 4.0 * base, base)?;
            let mut spec = fine_spec.clone();
            spec.ref_vol = ReferenceVol::Surface(vol);
            spec.drift = ReferenceDrift::LogMartingale;
            let fine = DualProblem::new(ReferenceMeasure::build(&spec)?, &coarse.instruments, coarse.statistic)?;
            let init = DualPotentials::zeros(&fine);
            Ok((fine, init))
        }
    }
}

#[derive(Debug, Clone)]
pub struct LevelOutcome {
    pub n_points: usize,
    pub problem: DualProblem,
    pub outcome: RunOutcome,
    pub accel: AccelStats,
}

/// Runs every level of `schedule`, warm-starting each from the previous one.
/// `base_spec.n_steps` is ignored; the coarsest level starts from zero.
pub fn run_multiscale(
    base_spec: &ReferenceSpec,
    instruments: &[Instrument],
    statistic: StatisticB,
    schedule: &MultiscaleSchedule,
    config: &SolverConfig,
    anderson_depth: usize,
) -> Result<Vec<LevelOutcome>> {
    let mut levels: Vec<LevelOutcome> = Vec::with_capacity(schedule.levels.len());
    for &points in &schedule.levels {
        let mut spec = base_spec.clone();
        spec.n_steps = points - 1;
        let (problem, init) = match levels.last() {
            None => {
                let p = DualProblem::new(ReferenceMeasure::build(&spec)?, instruments, statistic)?;
                let z = DualPotentials::zeros(&p);
                (p, z)
            }
            Some(prev) => refine_level(
                &prev.problem,
                &prev.outcome.potentials,
                &prev.outcome.cache,
                &spec,
                schedule.refine_mode,
            )?,
        };
        let (outcome, accel) = run_accelerated(&problem, init, config, anderson_depth)?;
        levels.push(LevelOutcome {
            n_points: points,
            problem,
            outcome,
            accel,
        });
    }
    Ok(levels)
}
