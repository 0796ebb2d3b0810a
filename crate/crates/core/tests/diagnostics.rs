use smot_core::diagnostics::*;
use smot_core::discretization::*;
use smot_core::dual::*;
use smot_core::market::*;
use smot_core::solver::*;

fn reference(n: usize, k_pts: f64, delta: f64) -> ReferenceMeasure {
    let mut spec = ReferenceSpec::constant_vol(100.0, 0.2, 1.0, n, &[1.0]);
    spec.k_pts = k_pts;
    spec.delta = delta;
    ReferenceMeasure::build(&spec).unwrap()
}

#[test]
fn reference_chain_prices_atm_call_near_black_scholes() {
    let r = reference(20, 10.0, 6.0);
    let ins = [Instrument {
        maturity: 1.0,
        strike: 100.0,
        kind: OptionKind::Call,
        target_price: 0.0,
    }];
    let p = DualProblem::new(r, &ins, StatisticB::MartingaleExp).unwrap();
    let pot = DualPotentials::zeros(&p);
    let mut cache = MessageCache::new(&p);
    forward_pass(&p, &pot, &mut cache).unwrap();
    backward_pass(&p, &pot, &mut cache).unwrap();
    let price = model_prices(&p, &pot, &cache)[0];
    assert!((price - 7.965567455405796).abs() < 0.05, "{price}");
}

#[test]
fn dirac_marginal_prices_the_payoff() {
    let r = reference(4, 6.0, 5.0);
    let ins = [Instrument {
        maturity: 1.0,
        strike: 95.0,
        kind: OptionKind::Call,
        target_price: 0.0,
    }];
    let p = DualProblem::new(r, &ins, StatisticB::MartingaleExp).unwrap();
    let mut pot = DualPotentials::zeros(&p);
    // Concentrate the last marginal on one point with a huge node potential.
    let j = p.reference.grids[4].nearest(p.reference.x0);
    pot.phi_nu[4][j] = 500.0;
    let mut cache = MessageCache::new(&p);
    forward_pass(&p, &pot, &mut cache).unwrap();
    backward_pass(&p, &pot, &mut cache).unwrap();
    let price = model_prices(&p, &pot, &cache)[0];
    let want = payoff(OptionKind::Call, 95.0, p.reference.grids[4].x(j));
    assert!((price - want).abs() < 1e-10, "{price} vs {want}");
}

#[test]
fn second_moment_bias_shrinks_linearly_in_h() {
    let mut bias = Vec::new();
    for n in [10, 20, 40] {
        let r = reference(n, 6.0, 6.0);
        let ch = MarkovChain::from_reference(&r).characteristics();
        let k = n / 2;
        let i = r.grids[k].nearest(r.grids[k].center);
        bias.push(ch.alpha[k][i] - 0.04);
    }
    for w in bias.windows(2) {
        let ratio = w[0] / w[1];
        assert!((ratio - 2.0).abs() < 0.1, "{bias:?}");
    }
}

#[test]
fn entropy_estimates_approach_each_other() {
    let limit = 0.5 * (2.25 - 1.0 - 2.25f64.ln());
    let mut gaps = Vec::new();
    for n in [10, 20, 40, 80] {
        let r = reference(n, 5.0, 8.0);
        let kernels =
            build_reference_kernels(&r.grids, &r.time_grid, &ReferenceVol::Constant(0.3), ReferenceDrift::LogMartingale, 5.0)
                .unwrap();
        let chain = MarkovChain::from_kernels(&r.grids, r.h(), &r.nu0, &kernels);
        let e = specific_entropy_of_chain(&chain, &r).unwrap();
        assert!((e.s_limit - limit).abs() < 1e-3, "{e:?}");
        gaps.push((e.h_kl - e.s_limit).abs());
    }
    assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
}

#[test]
fn entropy_requires_matching_grids() {
    let a = reference(4, 5.0, 5.0);
    let b = reference(5, 5.0, 5.0);
    let chain = MarkovChain::from_reference(&a);
    assert!(matches!(specific_entropy_of_chain(&chain, &b), Err(smot_core::SmotError::GridMismatch(_))));
}

#[test]
fn calibration_result_is_consistent() {
    let mut spec = ReferenceSpec::constant_vol(100.0, 0.2, 1.0, 5, &[0.6, 1.0]);
    spec.k_pts = 6.0;
    let ins = generate_instruments(&SsviParams::default(), 100.0, &[0.6, 1.0], &[1, 2]).unwrap();
    let p = DualProblem::new(ReferenceMeasure::build(&spec).unwrap(), &ins, StatisticB::MartingaleExp).unwrap();
    let config = SolverConfig {
        max_sweeps: 200,
        epsilon: 1e-8,
        ..SolverConfig::default()
    };
    let out = run(&p, &config).unwrap();
    let res = calibration_result(&p, &out.potentials, &out.cache, out.reports.clone()).unwrap();
    assert_eq!(res.marginals.len(), 6);
    for m in &res.marginals {
        assert!(m.iter().all(|v| *v >= 0.0));
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-8);
    }
    assert_eq!(res.model_prices.len(), ins.len());
    assert!(res.model_implied_vols.iter().all(Option::is_some));
    assert!(res.specific_entropy.h_kl > 0.0);
    assert!(res.price_error_l2 < out.reports[0].price_error_l2);
    let surface = local_vol_surface(&res.characteristics, &p.reference.grids, p.h());
    let vs = surface.to_vol_surface(0.1, 0.8, 0.2).unwrap();
    assert!(vs.sigma(p.reference.x0, 0.5) > 0.1);
}

#[test]
fn error_norms_vanish_when_exact() {
    assert_eq!(price_error_l2(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
    assert_eq!(martingale_error_l2(0.1, &[vec![0.5, 0.5]], &[vec![0.0, 0.0]]), 0.0);
}
