mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use smot_core::discretization::{ReferenceMeasure, ReferenceSpec};
use smot_core::dual::*;
use smot_core::market::payoff;
use smot_core::solver::*;

fn fresh_cache(p: &DualProblem, pot: &DualPotentials) -> MessageCache {
    let mut c = MessageCache::new(p);
    forward_pass(p, pot, &mut c).unwrap();
    backward_pass(p, pot, &mut c).unwrap();
    c
}

/// Root of a decreasing function by bisection.
fn bisect_decreasing(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    assert!(f(lo) > 0.0 && f(hi) < 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn price_block_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for trial in 0..6 {
        let mut p = common::random_problem(&mut rng, 3, StatisticB::MartingaleExp, true);
        let k = 1 + trial % 3;
        // Keep one instrument at k and push its target away from the model price.
        let keep = p.constraints[k].instruments[0];
        let mut ins: Vec<_> = p.instruments.clone();
        let kept = ins[keep].clone();
        ins.retain(|i| i.maturity != kept.maturity || (i.strike == kept.strike && i.kind == kept.kind));
        p = DualProblem::new(p.reference.clone(), &ins, StatisticB::MartingaleExp).unwrap();
        let mut pot = common::random_potentials(&mut rng, &p, 0.3);
        pot.lambda.iter_mut().for_each(|l| l.iter_mut().for_each(|v| *v = 0.0));
        let mut cache = fresh_cache(&p, &pot);
        let n = p.n_steps();
        let a: Vec<f64> = (0..p.grid_len(k))
            .map(|i| cache.psi_up[k][i] + pot.phi_nu[k][i] + if k < n { cache.psi_down[k][i] } else { 0.0 })
            .collect();
        let g: Vec<f64> = {
            let i = &p.instruments[p.constraints[k].instruments[0]];
            (0..p.grid_len(k)).map(|j| payoff(i.kind, i.strike, p.reference.grids[k].x(j))).collect()
        };
        let mass: f64 = a.iter().map(|v| v.exp()).sum();
        let model: f64 = a.iter().zip(&g).map(|(v, gv)| v.exp() * gv).sum::<f64>() / mass;
        let shift = if trial % 2 == 0 { 0.05 } else { -0.5 * model };
        let target = model + shift;
        p.constraints[k].targets[0] = target;
        let config = SolverConfig {
            w_price: 3.0,
            ..SolverConfig::default()
        };
        let h = p.h();
        let deriv = |lam: f64| {
            target - lam / config.w_price - a.iter().zip(&g).map(|(v, gv)| gv * (v + lam * gv / h).exp()).sum::<f64>()
        };
        let want = bisect_decreasing(deriv, -100.0, 100.0);
        solve_price_block(&p, &mut pot, &mut cache, k, &config).unwrap();
        let got = pot.lambda[k][0];
        assert!(got.signum() == shift.signum(), "trial {trial}: {got}");
        assert!((got - want).abs() <= 1e-8 * want.abs().max(1.0), "trial {trial}: {got} vs {want}");
    }
}

#[test]
fn price_block_is_stationary_when_calibrated() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut p = common::random_problem(&mut rng, 2, StatisticB::MartingaleExp, true);
    let mut pot = common::random_potentials(&mut rng, &p, 0.3);
    pot.lambda[2].iter_mut().for_each(|v| *v = 0.0);
    let cache = fresh_cache(&p, &pot);
    let marg = marginal_density(&p, &pot, &cache, 2);
    let c = &mut p.constraints[2];
    for (t, g) in c.targets.iter_mut().zip(&c.payoffs) {
        *t = marg.iter().zip(g).map(|(m, gv)| m * gv).sum::<f64>();
    }
    let mut cache = fresh_cache(&p, &pot);
    solve_price_block(&p, &mut pot, &mut cache, 2, &SolverConfig::default()).unwrap();
    assert!(pot.lambda[2].iter().all(|v| *v == 0.0));
}

fn driftvol_oracle_gradient(p: &DualProblem, pot: &DualPotentials, cache: &MessageCache, k: usize, i: usize, phi: [f64; 2], c: f64) -> [f64; 2] {
    let h = p.h();
    let dim = p.dim();
    let r = right_message(p, pot, cache, k + 1);
    let x = p.reference.grids[k].x(i);
    let kernel = &p.reference.kernels[k];
    let terms: Vec<(f64, [f64; 2])> = (0..p.grid_len(k + 1))
        .filter_map(|j| {
            let lw = kernel.log_weight(i, j)?;
            let b = p.statistic.eval(p.reference.grids[k + 1].x(j) - x);
            let e: f64 = (0..dim).map(|d| phi[d] * b[d]).sum::<f64>() / h + r[j] + lw;
            Some((e, b))
        })
        .collect();
    let max = terms.iter().fold(f64::NEG_INFINITY, |m, t| m.max(t.0));
    let (mut s, mut m0, mut m1) = (0.0, 0.0, 0.0);
    for (e, b) in &terms {
        let w = (e - max).exp();
        s += w;
        m0 += w * b[0];
        m1 += w * b[1];
    }
    [phi[0] / (2.0 * c) + m0 / s / h, phi[1] / (2.0 * c) + m1 / s / h]
}

#[test]
fn driftvol_block_matches_pointwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for trial in 0..6 {
        let p = common::random_problem(&mut rng, 3, StatisticB::MartingaleExp, true);
        let mut pot = common::random_potentials(&mut rng, &p, 0.5);
        let c = if trial % 2 == 0 { 1e4 } else { 0.7 };
        let config = SolverConfig {
            c_mart: c,
            ..SolverConfig::default()
        };
        let mut cache = fresh_cache(&p, &pot);
        let k = trial % 3;
        let before = cache.clone();
        let pot_before = pot.clone();
        solve_driftvol_block(&p, &mut pot, &mut cache, k, &config).unwrap();
        for i in 0..p.grid_len(k) {
            if k == 0 && p.mu0[i] == 0.0 {
                continue;
            }
            let bmax = 2.0 * c / p.h() * 2.0 + 10.0;
            let want = bisect_decreasing(
                |f| -driftvol_oracle_gradient(&p, &pot_before, &before, k, i, [f, 0.0], c)[0],
                -bmax,
                bmax,
            );
            let got = pot.phi_m[k][i];
            assert!((got - want).abs() <= 1e-8 * want.abs().max(1.0), "trial {trial} k={k} i={i}: {got} vs {want}");
        }
    }
}

#[test]
fn driftvol_block_pair_statistic_is_stationary() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for trial in 0..4 {
        let p = common::random_problem(&mut rng, 3, StatisticB::DriftVolPair, true);
        let mut pot = common::random_potentials(&mut rng, &p, 0.5);
        let config = SolverConfig {
            c_mart: 0.5,
            ..SolverConfig::default()
        };
        let mut cache = fresh_cache(&p, &pot);
        let k = trial % 3;
        let before = cache.clone();
        solve_driftvol_block(&p, &mut pot, &mut cache, k, &config).unwrap();
        for i in 0..p.grid_len(k) {
            if k == 0 && p.mu0[i] == 0.0 {
                continue;
            }
            let phi = [pot.phi_m[k][2 * i], pot.phi_m[k][2 * i + 1]];
            let g = driftvol_oracle_gradient(&p, &pot, &before, k, i, phi, 0.5);
            assert!(g[0].abs() < 1e-8 && g[1].abs() < 1e-8, "trial {trial} i={i}: {g:?}");
        }
    }
}

#[test]
fn driftvol_gradient_vanishes_after_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let p = common::random_problem(&mut rng, 3, StatisticB::MartingaleExp, true);
    let mut pot = common::random_potentials(&mut rng, &p, 0.5);
    let mut cache = fresh_cache(&p, &pot);
    let config = SolverConfig::default();
    solve_driftvol_block(&p, &mut pot, &mut cache, 1, &config).unwrap();
    let g = driftvol_gradient(&p, &pot, &cache, 1, config.c_mart);
    assert!(g.iter().all(|v| v.abs() <= 1e-8), "{g:?}");
}

#[test]
fn initial_marginal_block_enforces_mu0() {
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    let p = common::random_problem(&mut rng, 3, StatisticB::MartingaleExp, true);
    let mut pot = common::random_potentials(&mut rng, &p, 1.0);
    let mut cache = fresh_cache(&p, &pot);
    solve_marginal_block(&p, &mut pot, &mut cache, 0, &SolverConfig::default());
    let m = marginal_density(&p, &pot, &cache, 0);
    for (a, b) in m.iter().zip(&p.mu0) {
        assert!((a - b).abs() <= 1e-14 * b.max(1e-300) || (*b == 0.0 && *a == 0.0), "{a} vs {b}");
    }
}

#[test]
fn interior_marginal_block_saturates() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let p = common::random_problem(&mut rng, 3, StatisticB::MartingaleExp, false);
    let mut pot = common::random_potentials(&mut rng, &p, 1.0);
    pot.phi_m[1].iter_mut().for_each(|v| *v = 0.0);
    let mut cache = fresh_cache(&p, &pot);
    let config = SolverConfig::default();
    solve_marginal_block(&p, &mut pot, &mut cache, 1, &config);
    assert!(pot.phi_nu[1].iter().all(|v| *v == 0.0));
    solve_marginal_block(&p, &mut pot, &mut cache, 2, &config);
    let cost = config.cost();
    for (i, v) in pot.phi_nu[2].iter().enumerate() {
        assert_eq!(*v, cost.f_star(&[pot.phi_m[2][i]]));
    }
}

#[test]
fn dirac_initial_law_gives_log_ratio() {
    let mut spec = ReferenceSpec::constant_vol(1.0, 0.2, 1.0, 2, &[]);
    spec.k_pts = 3.0;
    let p = DualProblem::new(ReferenceMeasure::build(&spec).unwrap(), &[], StatisticB::MartingaleExp).unwrap();
    let mut pot = DualPotentials::zeros(&p);
    let mut cache = fresh_cache(&p, &pot);
    solve_marginal_block(&p, &mut pot, &mut cache, 0, &SolverConfig::default());
    // ψ^u_0 = log μ₀ = 0 at the atom and ψ^d_0 = 0, so the ratio is 0 there.
    assert!(pot.phi_nu[0].iter().all(|v| v.abs() < 1e-14));
    let atom = p.mu0.iter().position(|&m| m == 1.0).unwrap();
    assert_eq!(cache.psi_up[0][atom], 0.0);
}

#[test]
fn zero_constraint_problem_converges_in_one_sweep() {
    let mut spec = ReferenceSpec::constant_vol(100.0, 0.2, 1.0, 5, &[]);
    spec.k_pts = 8.0;
    let p = DualProblem::new(ReferenceMeasure::build(&spec).unwrap(), &[], StatisticB::MartingaleExp).unwrap();
    let config = SolverConfig {
        c_mart: 0.0,
        ..SolverConfig::default()
    };
    let mut pot = DualPotentials::zeros(&p);
    let mut cache = MessageCache::new(&p);
    sweep(&p, &mut pot, &mut cache, &config, 1).unwrap();
    let second = sweep(&p, &mut pot, &mut cache, &config, 2).unwrap();
    assert!(second.e_max <= 1e-12, "{}", second.e_max);
    assert!((second.dual_value + p.h()).abs() < 1e-12);
    assert!(pot.sup_norm() < 1e-12);
}

#[test]
fn no_instruments_terminates_within_two_sweeps() {
    let mut spec = ReferenceSpec::constant_vol(100.0, 0.2, 1.0, 5, &[]);
    spec.k_pts = 8.0;
    let p = DualProblem::new(ReferenceMeasure::build(&spec).unwrap(), &[], StatisticB::MartingaleExp).unwrap();
    let exact = run(
        &p,
        &SolverConfig {
            c_mart: 0.0,
            ..SolverConfig::default()
        },
    )
    .unwrap();
    assert!(exact.reports.len() <= 2);
    assert_eq!(exact.status, RunStatus::Converged);
    // Truncated boundary rows are not exact martingales, so the penalised
    // problem moves away from the reference there and needs a few more sweeps.
    let out = run(&p, &SolverConfig::default()).unwrap();
    assert!(out.reports.len() <= 4, "{}", out.reports.len());
    assert_eq!(out.status, RunStatus::Converged);
}

#[test]
fn history_is_capped_by_max_sweeps() {
    let mut rng = ChaCha8Rng::seed_from_u64(38);
    let p = common::random_problem(&mut rng, 3, StatisticB::MartingaleExp, true);
    let config = SolverConfig {
        max_sweeps: 7,
        epsilon: 1e-300,
        ..SolverConfig::default()
    };
    let out = run(&p, &config).unwrap();
    assert_eq!(out.reports.len(), 7);
    assert_eq!(out.status, RunStatus::MaxSweepsReached);
    assert!(out.reports.windows(2).all(|w| w[1].dual_value >= w[0].dual_value - 1e-9 * w[0].dual_value.abs()));
}

#[test]
fn eliminated_and_explicit_modes_agree_at_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(39);
    let p = common::random_problem(&mut rng, 3, StatisticB::MartingaleExp, true);
    let base = SolverConfig {
        c_mart: 1.0,
        w_price: 5.0,
        epsilon: 1e-11,
        max_sweeps: 20_000,
        ..SolverConfig::default()
    };
    let a = run(&p, &base).unwrap();
    let b = run(
        &p,
        &SolverConfig {
            eliminate_phi_nu: true,
            ..base.clone()
        },
    )
    .unwrap();
    assert_eq!(a.status, RunStatus::Converged);
    assert_eq!(b.status, RunStatus::Converged);
    let (da, db) = (a.reports.last().unwrap().dual_value, b.reports.last().unwrap().dual_value);
    assert!((da - db).abs() <= 1e-9 * da.abs(), "{da} vs {db}");
    assert!(a.potentials.max_abs_diff(&b.potentials) < 1e-6);
}

#[test]
fn blocks_are_idempotent_at_a_stationary_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let p = common::random_problem(&mut rng, 2, StatisticB::MartingaleExp, true);
    let config = SolverConfig {
        c_mart: 1.0,
        w_price: 5.0,
        epsilon: 1e-12,
        max_sweeps: 20_000,
        ..SolverConfig::default()
    };
    let out = run(&p, &config).unwrap();
    assert_eq!(out.status, RunStatus::Converged);
    let mut pot = out.potentials.clone();
    let mut cache = out.cache.clone();
    let before = pot.clone();
    for k in 0..=2 {
        ensure_down(&p, &pot, &mut cache).unwrap();
        solve_price_block(&p, &mut pot, &mut cache, k, &config).unwrap();
        if k < 2 {
            solve_driftvol_block(&p, &mut pot, &mut cache, k, &config).unwrap();
            update_psi_up(&p, &pot, &mut cache, k).unwrap();
        }
    }
    assert!(pot.max_abs_diff(&before) < 1e-8, "{}", pot.max_abs_diff(&before));
}

#[test]
fn parallel_and_serial_sweeps_agree() {
    let mut spec = ReferenceSpec::constant_vol(100.0, 0.2, 1.0, 5, &[0.6, 1.0]);
    spec.k_pts = 12.0;
    let ins = smot_core::market::generate_instruments(
        &smot_core::market::SsviParams::default(),
        100.0,
        &[0.6, 1.0],
        &[2, 2],
    )
    .unwrap();
    let p = DualProblem::new(ReferenceMeasure::build(&spec).unwrap(), &ins, StatisticB::MartingaleExp).unwrap();
    let config = SolverConfig {
        max_sweeps: 3,
        epsilon: 1e-300,
        ..SolverConfig::default()
    };
    let go = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run(&p, &config).unwrap())
    };
    let (a, b) = (go(1), go(4));
    assert!(a.potentials.max_abs_diff(&b.potentials) <= 1e-12);
}
