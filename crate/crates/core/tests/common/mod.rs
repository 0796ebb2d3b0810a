#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use smot_core::discretization::{ReferenceMeasure, ReferenceSpec};
use smot_core::dual::{CostParams, DualPotentials, DualProblem, StatisticB};
use smot_core::market::{black_scholes_price, Instrument, OptionKind};

pub const MAX_POINTS: usize = 25;

/// Small instance on unit spot with a few options at every timestep after 0.
/// Grids never exceed `MAX_POINTS`.
pub fn random_problem(rng: &mut ChaCha8Rng, n_steps: usize, statistic: StatisticB, with_options: bool) -> DualProblem {
    loop {
        let times: Vec<f64> = (1..=n_steps).map(|k| k as f64 / n_steps as f64).collect();
        let mut spec = ReferenceSpec::constant_vol(1.0, rng.random_range(0.15..0.3), 1.0, n_steps, &times);
        spec.delta = rng.random_range(1.5..2.2);
        spec.k_pts = rng.random_range(2.0..2.6);
        spec.v0 = rng.random_range(0.02..0.08);
        let reference = ReferenceMeasure::build(&spec).unwrap();
        if reference.grids.iter().any(|g| g.len > MAX_POINTS) {
            continue;
        }
        let mut instruments = Vec::new();
        if with_options {
            for &t in &times {
                for _ in 0..rng.random_range(1..=3) {
                    let strike = rng.random_range(0.85..1.15);
                    let kind = if strike >= 1.0 { OptionKind::Call } else { OptionKind::Put };
                    let vol: f64 = rng.random_range(0.15..0.35);
                    instruments.push(Instrument {
                        maturity: t,
                        strike,
                        kind,
                        target_price: black_scholes_price(1.0, strike, vol * vol * t, kind),
                    });
                }
            }
        }
        return DualProblem::new(reference, &instruments, statistic).unwrap();
    }
}

/// Every potential uniform in `[−scale, scale]`.
pub fn random_potentials(rng: &mut ChaCha8Rng, problem: &DualProblem, scale: f64) -> DualPotentials {
    let mut pot = DualPotentials::zeros(problem);
    for v in pot.phi_nu.iter_mut().chain(&mut pot.phi_m).chain(&mut pot.lambda) {
        v.iter_mut().for_each(|x| *x = rng.random_range(-scale..=scale));
    }
    pot
}

/// Lifts interior and final `φ_ν` above their conjugate bounds by `U[0, 1)`.
pub fn make_feasible(rng: &mut ChaCha8Rng, problem: &DualProblem, pot: &mut DualPotentials, cost: &CostParams) {
    let n = problem.n_steps();
    let dim = problem.dim();
    for k in 1..n {
        for i in 0..problem.grid_len(k) {
            pot.phi_nu[k][i] = cost.f_star(&pot.phi_m[k][i * dim..(i + 1) * dim]) + rng.random_range(0.0..1.0);
        }
    }
    pot.phi_nu[n].iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
}

/// `max |a − b| / max |b|`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn rel_err_scalar(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

/// Worst relative disagreement between the message recursions and the
/// dense path tensor on one random instance: marginals, joints, path mass
/// and dual objective.
pub fn oracle_disagreement(rng: &mut ChaCha8Rng, n_steps: usize, statistic: StatisticB) -> f64 {
    use smot_core::dual::*;
    use smot_core::oracle::*;

    let problem = random_problem(rng, n_steps, statistic, true);
    let cost = CostParams {
        c_mart: rng.random_range(0.1..2.0),
        w_price: rng.random_range(0.5..2.0),
    };
    let mut pot = random_potentials(rng, &problem, 1.0);
    let mut worst = 0.0f64;
    for pass in 0..2 {
        if pass == 1 {
            make_feasible(rng, &problem, &mut pot, &cost);
        }
        let mut cache = MessageCache::new(&problem);
        forward_pass(&problem, &pot, &mut cache).unwrap();
        backward_pass(&problem, &pot, &mut cache).unwrap();
        let tensor = dense_tensor(&problem, &pot).unwrap();
        for k in 0..=n_steps {
            worst = worst.max(rel_err(&marginal_density(&problem, &pot, &cache, k), &oracle_marginal(&tensor, k)));
        }
        for k in 0..n_steps {
            let dense = joint_density(&problem, &pot, &cache, k).to_dense();
            let oracle = oracle_joint(&tensor, k);
            worst = worst.max(rel_err(&dense.concat(), &oracle.concat()));
        }
        worst = worst.max(rel_err_scalar(path_mass(&problem, &pot, &cache), tensor.total_mass()));
        let d = dual_objective(&problem, &pot, &cache, &cost, false).unwrap();
        let o = oracle_objective(&tensor, &problem, &pot, &cost);
        if pass == 1 {
            worst = worst.max(rel_err_scalar(d, o));
        } else if d != o {
            // Both sides must agree on infeasibility too.
            worst = worst.max(rel_err_scalar(d, o));
        }
    }
    worst
}

/// Runs `sweeps` Gauss–Seidel sweeps block by block from random feasible
/// potentials and returns the worst relative decrease of the dual objective
/// over single blocks and over whole sweeps (0 if it never decreases).
pub fn ascent_violation(
    rng: &mut ChaCha8Rng,
    n_steps: usize,
    statistic: StatisticB,
    eliminate: bool,
    sweeps: usize,
) -> f64 {
    use smot_core::dual::*;
    use smot_core::solver::*;

    let problem = random_problem(rng, n_steps, statistic, true);
    let config = SolverConfig {
        c_mart: if rng.random_bool(0.5) { 1e4 } else { rng.random_range(0.2..5.0) },
        w_price: rng.random_range(0.5..10.0),
        eliminate_phi_nu: eliminate,
        ..SolverConfig::default()
    };
    let cost = config.cost();
    let mut pot = random_potentials(rng, &problem, 0.5);
    if eliminate {
        pot.saturate_interior(&problem, &cost);
    } else {
        make_feasible(rng, &problem, &mut pot, &cost);
    }
    let mut cache = MessageCache::new(&problem);
    let value = |pot: &DualPotentials, cache: &MessageCache| {
        let mut c = cache.clone();
        ensure_up(&problem, pot, &mut c).unwrap();
        dual_objective(&problem, pot, &c, &cost, eliminate).unwrap()
    };
    let drop = |before: f64, after: f64| ((before - after) / before.abs().max(1e-300)).max(0.0);
    let mut worst = 0.0f64;
    let mut last = value(&pot, &cache);
    assert!(last.is_finite());
    for _ in 0..sweeps {
        let start = last;
        ensure_down(&problem, &pot, &mut cache).unwrap();
        for k in 0..=n_steps {
            solve_marginal_block(&problem, &mut pot, &mut cache, k, &config);
            let v = value(&pot, &cache);
            worst = worst.max(drop(last, v));
            last = v;
            solve_price_block(&problem, &mut pot, &mut cache, k, &config).unwrap();
            let v = value(&pot, &cache);
            worst = worst.max(drop(last, v));
            last = v;
            if k < n_steps {
                solve_driftvol_block(&problem, &mut pot, &mut cache, k, &config).unwrap();
                let v = value(&pot, &cache);
                worst = worst.max(drop(last, v));
                last = v;
                update_psi_up(&problem, &pot, &mut cache, k).unwrap();
            }
        }
        worst = worst.max(drop(start, last));
    }
    worst
}

/// Adaptive Simpson quadrature with absolute tolerance `tol`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
    }
    #[allow(clippy::too_many_arguments)]
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64, m: f64, fm: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let (lm, flm, left) = simpson(f, a, fa, m, fm);
        let (rm, frm, right) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, fa, m, fm, lm, flm, left, 0.5 * tol, depth - 1) + rec(f, m, fm, b, fb, rm, frm, right, 0.5 * tol, depth - 1)
    }
    let (fa, fb) = (f(a), f(b));
    let (m, fm, whole) = simpson(f, a, fa, b, fb);
    rec(f, a, fa, b, fb, m, fm, whole, tol, 50)
}

/// `∫ p log(p/q)` for two normal densities by adaptive quadrature over
/// `μ₁ ± 14σ₁`.
pub fn normal_kl_quadrature(mu1: f64, s1: f64, mu2: f64, s2: f64) -> f64 {
    let logpdf = |x: f64, m: f64, s: f64| {
        let z = (x - m) / s;
        -0.5 * z * z - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    };
    let f = move |x: f64| {
        let lp = logpdf(x, mu1, s1);
        lp.exp() * (lp - logpdf(x, mu2, s2))
    };
    adaptive_simpson(&f, mu1 - 14.0 * s1, mu1 + 14.0 * s1, 1e-12)
}
