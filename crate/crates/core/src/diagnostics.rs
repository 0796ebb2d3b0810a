//! Model characteristics from conditional moments, local volatility,
//! model prices and implied vols, error norms and specific relative entropy.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discretization::{ReferenceMeasure, SpatialGrid, TransitionKernel, VolSlice, VolSurface};
use crate::dual::{conditional_kernel, marginal_density, BandRow, BandedMatrix, DualPotentials, DualProblem, MessageCache, StatisticB};
use crate::error::{Result, SmotError};
use crate::market::implied_vol;
use crate::solver::SweepReport;

/// Marginal mass below which a point is masked.
pub const MASS_FLOOR: f64 = 1e-300;

/// Conditional moments per timestep `k < N`, over the grid of `X_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Characteristics {
    /// `β_k(x) = E[X_{k+1} − X_k | X_k = x]/h`.
    pub beta: Vec<Vec<f64>>,
    /// `α_k(x) = E[(X_{k+1} − X_k)² | X_k = x]/h`.
    pub alpha: Vec<Vec<f64>>,
    /// `σ_k(x) = sqrt(max(α_k − h·β_k², 0))`.
    pub local_vol: Vec<Vec<f64>>,
    /// `b_k(x) = E[1 − e^{X_{k+1} − X_k} | X_k = x]/h`.
    pub mart_stat: Vec<Vec<f64>>,
    /// `true` where the marginal mass is below [`MASS_FLOOR`]; all moments are 0 there.
    pub mask: Vec<Vec<bool>>,
}

/// A Markov chain on a sequence of lattice grids: normalised marginals and
/// row-stochastic transitions.
#[derive(Debug, Clone)]
pub struct MarkovChain {
    pub grids: Vec<SpatialGrid>,
    pub h: f64,
    pub marginals: Vec<Vec<f64>>,
    pub transitions: Vec<BandedMatrix>,
}

impl MarkovChain {
    /// The chain induced by dual potentials. Needs clean messages.
    pub fn from_dual(problem: &DualProblem, pot: &DualPotentials, cache: &MessageCache) -> Self {
        let n = problem.n_steps();
        let marginals = (0..=n)
            .map(|k| normalized(marginal_density(problem, pot, cache, k)))
            .collect();
        let transitions = (0..n).into_par_iter().map(|k| conditional_kernel(problem, pot, cache, k)).collect();
        Self {
            grids: problem.reference.grids.clone(),
            h: problem.h(),
            marginals,
            transitions,
        }
    }

    /// The reference chain itself.
    pub fn from_reference(reference: &ReferenceMeasure) -> Self {
        Self::from_kernels(&reference.grids, reference.h(), &reference.nu0, &reference.kernels)
    }

    /// Chain with the given kernels and initial law, marginals propagated forward.
    pub fn from_kernels(grids: &[SpatialGrid], h: f64, nu0: &[f64], kernels: &[TransitionKernel]) -> Self {
        let transitions: Vec<BandedMatrix> = kernels
            .iter()
            .map(|kern| BandedMatrix {
                n_cols: kern.n_dst(),
                rows: (0..kern.n_src())
                    .map(|i| {
                        let row = kern.row(i);
                        BandRow {
                            start: row.start,
                            values: row.log_w.iter().map(|l| (l - row.log_norm).exp()).collect(),
                        }
                    })
                    .collect(),
            })
            .collect();
        let mut marginals = vec![nu0.to_vec()];
        for t in &transitions {
            let prev = marginals.last().unwrap();
            let mut next = vec![0.0; t.n_cols];
            for (p, row) in prev.iter().zip(&t.rows) {
                for (m, q) in row.values.iter().enumerate() {
                    next[row.start + m] += p * q;
                }
            }
            marginals.push(next);
        }
        Self {
            grids: grids.to_vec(),
            h,
            marginals,
            transitions,
        }
    }

    pub fn n_steps(&self) -> usize {
        self.transitions.len()
    }

    pub fn characteristics(&self) -> Characteristics {
        let h = self.h;
        let per_step: Vec<_> = (0..self.n_steps())
            .into_par_iter()
            .map(|k| {
                let (src, dst) = (&self.grids[k], &self.grids[k + 1]);
                let t = &self.transitions[k];
                let n = src.len;
                let (mut beta, mut alpha, mut vol, mut b, mut mask) =
                    (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![false; n]);
                for i in 0..n {
                    if self.marginals[k][i] < MASS_FLOOR {
                        mask[i] = true;
                        continue;
                    }
                    let row = &t.rows[i];
                    let x = src.x(i);
                    let (mut m1, mut m2, mut mb) = (0.0, 0.0, 0.0);
                    for (m, q) in row.values.iter().enumerate() {
                        let dy = dst.x(row.start + m) - x;
                        m1 += q * dy;
                        m2 += q * dy * dy;
                        mb += q * -dy.exp_m1();
                    }
                    beta[i] = m1 / h;
                    alpha[i] = m2 / h;
                    vol[i] = (alpha[i] - h * beta[i] * beta[i]).max(0.0).sqrt();
                    b[i] = mb / h;
                }
                (beta, alpha, vol, b, mask)
            })
            .collect();
        let mut c = Characteristics {
            beta: Vec::new(),
            alpha: Vec::new(),
            local_vol: Vec::new(),
            mart_stat: Vec::new(),
            mask: Vec::new(),
        };
        for (beta, alpha, vol, b, mask) in per_step {
            c.beta.push(beta);
            c.alpha.push(alpha);
            c.local_vol.push(vol);
            c.mart_stat.push(b);
            c.mask.push(mask);
        }
        c
    }

    /// Local volatility from the centred conditional variance
    /// `Var[X_{k+1} − X_k | X_k]/h`, computed in two passes.
    pub fn local_vol_by_variance(&self) -> Vec<Vec<f64>> {
        (0..self.n_steps())
            .map(|k| {
                let (src, dst) = (&self.grids[k], &self.grids[k + 1]);
                (0..src.len)
                    .map(|i| {
                        if self.marginals[k][i] < MASS_FLOOR {
                            return 0.0;
                        }
                        let row = &self.transitions[k].rows[i];
                        let x = src.x(i);
                        let dys = || row.values.iter().enumerate().map(|(m, q)| (*q, dst.x(row.start + m) - x));
                        let mean: f64 = dys().map(|(q, d)| q * d).sum();
                        let var: f64 = dys().map(|(q, d)| q * (d - mean) * (d - mean)).sum();
                        (var / self.h).max(0.0).sqrt()
                    })
                    .collect()
            })
            .collect()
    }
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    if s > 0.0 && s.is_finite() {
        v.iter_mut().for_each(|x| *x /= s);
    }
    v
}

/// Conditional moments of the chain induced by the potentials.
pub fn extract_characteristics(problem: &DualProblem, pot: &DualPotentials, cache: &MessageCache) -> Characteristics {
    MarkovChain::from_dual(problem, pot, cache).characteristics()
}

/// `σ(t_k, x)` on the `(t_k, x)` lattice for `k < N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalVolSurface {
    pub times: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
    pub mask: Vec<Vec<bool>>,
}

pub fn local_vol_surface(ch: &Characteristics, grids: &[SpatialGrid], h: f64) -> LocalVolSurface {
    LocalVolSurface {
        times: (0..ch.local_vol.len()).map(|k| k as f64 * h).collect(),
        x: grids[..ch.local_vol.len()].iter().map(SpatialGrid::points).collect(),
        sigma: ch.local_vol.clone(),
        mask: ch.mask.clone(),
    }
}

impl LocalVolSurface {
    /// Interpolable surface restricted to the unmasked band of each slice,
    /// with `floor`/`cap` applied and masked or degenerate points replaced
    /// by `fallback`.
    pub fn to_vol_surface(&self, floor: f64, cap: f64, fallback: f64) -> Result<VolSurface> {
        let mut times = Vec::new();
        let mut slices = Vec::new();
        for (k, t) in self.times.iter().enumerate() {
            let sig = &self.sigma[k];
            let live: Vec<usize> = (0..sig.len()).filter(|&i| !self.mask[k][i] && sig[i] > 0.0).collect();
            let (lo, hi) = match (live.first(), live.last()) {
                (Some(&a), Some(&b)) => (a, b),
                _ => {
                    times.push(*t);
                    slices.push(VolSlice {
                        x_start: 0.0,
                        dx: 1.0,
                        values: vec![fallback],
                    });
                    continue;
                }
            };
            let values = (lo..=hi)
                .map(|i| {
                    if self.mask[k][i] || sig[i] <= 0.0 {
                        fallback
                    } else {
                        sig[i].clamp(floor, cap)
                    }
                })
                .collect();
            let dx = if self.x[k].len() > 1 { self.x[k][1] - self.x[k][0] } else { 1.0 };
            times.push(*t);
            slices.push(VolSlice {
                x_start: self.x[k][lo],
                dx,
                values,
            });
        }
        VolSurface::new(times, slices)
    }
}

/// Model prices `E_{ν_k}[G_i]` with the maturity marginal normalised by its mass.
pub fn model_prices(problem: &DualProblem, pot: &DualPotentials, cache: &MessageCache) -> Vec<f64> {
    let mut out = vec![0.0; problem.instruments.len()];
    for (k, cons) in problem.constraints.iter().enumerate() {
        if cons.is_empty() {
            continue;
        }
        let nu = normalized(marginal_density(problem, pot, cache, k));
        for (idx, g) in cons.instruments.iter().zip(&cons.payoffs) {
            out[*idx] = nu.iter().zip(g).map(|(p, v)| p * v).sum();
        }
    }
    out
}

/// Black–Scholes implied vols of model prices (forward = spot); `None`
/// when a price lies outside the no-arbitrage bounds.
pub fn model_implied_vols(problem: &DualProblem, prices: &[f64]) -> Vec<Option<f64>> {
    let spot = problem.reference.x0.exp();
    problem
        .instruments
        .iter()
        .zip(prices)
        .map(|(ins, p)| implied_vol(spot, ins.strike, ins.maturity, *p, ins.kind).ok())
        .collect()
}

pub fn price_error_l2(prices: &[f64], targets: &[f64]) -> f64 {
    prices.iter().zip(targets).map(|(g, c)| (g - c) * (g - c)).sum::<f64>().sqrt()
}

/// `sqrt(h·Σ_k Σ_x ν_k(x)·b_k(x)²)` with normalised marginals.
pub fn martingale_error_l2(h: f64, marginals: &[Vec<f64>], mart_stat: &[Vec<f64>]) -> f64 {
    let s: f64 = marginals
        .iter()
        .zip(mart_stat)
        .map(|(nu, b)| nu.iter().zip(b).map(|(p, v)| p * v * v).sum::<f64>())
        .sum();
    (h * s).sqrt()
}

/// `(price_error_l2, martingale_error_l2)` of the chain induced by the
/// potentials; needs clean messages.
pub fn error_norms(problem: &DualProblem, pot: &DualPotentials, cache: &MessageCache) -> (f64, f64) {
    let prices = model_prices(problem, pot, cache);
    let targets: Vec<f64> = problem.instruments.iter().map(|i| i.target_price).collect();
    let n = problem.n_steps();
    let h = problem.h();
    let mart = if problem.statistic == StatisticB::MartingaleExp {
        let marginals: Vec<Vec<f64>> = (0..n)
            .map(|k| normalized(marginal_density(problem, pot, cache, k)))
            .collect();
        let b: Vec<Vec<f64>> = cache.cond_mean_b.iter().map(|v| v.iter().map(|m| m / h).collect()).collect();
        martingale_error_l2(h, &marginals, &b)
    } else {
        let chain = MarkovChain::from_dual(problem, pot, cache);
        let ch = chain.characteristics();
        martingale_error_l2(h, &chain.marginals[..n], &ch.mart_stat)
    };
    (price_error_l2(&prices, &targets), mart)
}

/// `KL(N(μ₁, σ₁²) | N(μ₂, σ₂²))`.
pub fn normal_kl(mu1: f64, sigma1: f64, mu2: f64, sigma2: f64) -> f64 {
    let r = (sigma1 / sigma2).powi(2);
    let d = (mu1 - mu2) / sigma2;
    0.5 * (r - 1.0 - r.ln() + d * d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    /// `h·KL(ℙ^h | P̄^h)` from the transition rows.
    pub h_kl: f64,
    /// `½ Σ_k h Σ_x ν_k(x)(σ_k²/σ̄² − 1 − log(σ_k²/σ̄²))` from extracted local vols.
    pub s_limit: f64,
}

/// Specific relative entropy of `chain` against `reference`, which must
/// live on the same grids. The initial laws are assumed equal.
pub fn specific_entropy_of_chain(chain: &MarkovChain, reference: &ReferenceMeasure) -> Result<EntropyReport> {
    let n = chain.n_steps();
    if reference.n_steps() != n || reference.grids != chain.grids {
        return Err(SmotError::GridMismatch("chain and reference grids differ".into()));
    }
    let h = chain.h;
    let kl_steps: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|k| {
            let kern = &reference.kernels[k];
            let mut total = 0.0;
            for (i, row) in chain.transitions[k].rows.iter().enumerate() {
                let p = chain.marginals[k][i];
                if p < MASS_FLOOR {
                    continue;
                }
                let rr = kern.row(i);
                let mut kl = 0.0;
                for (m, q) in row.values.iter().enumerate() {
                    if *q == 0.0 {
                        continue;
                    }
                    let j = row.start + m;
                    if j < rr.start || j >= rr.end() {
                        return f64::INFINITY;
                    }
                    kl += q * (q.ln() - (rr.log_w[j - rr.start] - rr.log_norm));
                }
                total += p * kl;
            }
            total
        })
        .collect();
    let h_kl = h * kl_steps.iter().sum::<f64>();

    let ch = chain.characteristics();
    let mut s = 0.0;
    for k in 0..n {
        let t = k as f64 * h;
        for (i, sig) in ch.local_vol[k].iter().enumerate() {
            let p = chain.marginals[k][i];
            if ch.mask[k][i] || *sig <= 0.0 {
                continue;
            }
            let sb = reference.ref_vol.sigma(chain.grids[k].x(i), t);
            let r = (sig / sb).powi(2);
            s += p * (r - 1.0 - r.ln());
        }
    }
    Ok(EntropyReport {
        h_kl,
        s_limit: 0.5 * h * s,
    })
}

/// Specific relative entropy of the calibrated chain against the problem's reference.
pub fn specific_entropy(problem: &DualProblem, pot: &DualPotentials, cache: &MessageCache) -> Result<EntropyReport> {
    let chain = MarkovChain::from_dual(problem, pot, cache);
    specific_entropy_of_chain(&chain, &problem.reference)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub times: Vec<f64>,
    pub grids_x: Vec<Vec<f64>>,
    /// Normalised marginal masses per timestep.
    pub marginals: Vec<Vec<f64>>,
    pub characteristics: Characteristics,
    pub model_prices: Vec<f64>,
    pub model_implied_vols: Vec<Option<f64>>,
    pub history: Vec<SweepReport>,
    pub specific_entropy: EntropyReport,
    pub price_error_l2: f64,
    pub martingale_error_l2: f64,
}

/// Collects every diagnostic of a solved problem. Needs clean messages.
pub fn calibration_result(
    problem: &DualProblem,
    pot: &DualPotentials,
    cache: &MessageCache,
    history: Vec<SweepReport>,
) -> Result<CalibrationResult> {
    let chain = MarkovChain::from_dual(problem, pot, cache);
    let characteristics = chain.characteristics();
    let specific_entropy = specific_entropy_of_chain(&chain, &problem.reference)?;
    let prices = model_prices(problem, pot, cache);
    let ivs = model_implied_vols(problem, &prices);
    let (price_error_l2, martingale_error_l2) = error_norms(problem, pot, cache);
    Ok(CalibrationResult {
        times: (0..=problem.n_steps()).map(|k| problem.reference.time_grid.time(k)).collect(),
        grids_x: problem.reference.grids.iter().map(SpatialGrid::points).collect(),
        marginals: chain.marginals,
        characteristics,
        model_prices: prices,
        model_implied_vols: ivs,
        history,
        specific_entropy,
        price_error_l2,
        martingale_error_l2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretization::ReferenceSpec;

    fn reference(k_pts: f64, delta: f64) -> ReferenceMeasure {
        let mut spec = ReferenceSpec::constant_vol(100.0, 0.2, 1.0, 10, &[]);
        spec.k_pts = k_pts;
        spec.delta = delta;
        ReferenceMeasure::build(&spec).unwrap()
    }

    fn interior(grid: &SpatialGrid, kern: &TransitionKernel, i: usize) -> bool {
        !kern.is_clipped(i) && (grid.x(i) - grid.center).abs() < 0.5 * grid.half_width
    }

    #[test]
    fn reference_chain_moments() {
        let r = reference(20.0, 6.0);
        let chain = MarkovChain::from_reference(&r);
        let ch = chain.characteristics();
        let h = r.h();
        for k in 1..10 {
            for i in 0..r.grids[k].len {
                if !interior(&r.grids[k], &r.kernels[k], i) || ch.mask[k][i] {
                    continue;
                }
                assert!((ch.beta[k][i] + 0.02).abs() <= 1e-4 * 0.02);
                let a = 0.04 + h * 0.0004;
                assert!((ch.alpha[k][i] - a).abs() <= 1e-4 * a);
                assert!(ch.mart_stat[k][i].abs() < 1e-6);
                assert!((ch.local_vol[k][i] - 0.2).abs() < 2e-3);
            }
        }
        // two code paths for σ agree
        let v = chain.local_vol_by_variance();
        for k in 0..10 {
            for (a, b) in v[k].iter().zip(&ch.local_vol[k]) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn martingale_stat_matches_moment_form() {
        // b ≈ −(β + α/2) up to O(h) for the lognormal increments
        let r = reference(20.0, 6.0);
        let ch = MarkovChain::from_reference(&r).characteristics();
        let h = r.h();
        let k = 5;
        for i in 0..r.grids[k].len {
            if !interior(&r.grids[k], &r.kernels[k], i) {
                continue;
            }
            let moment = -(ch.beta[k][i] + 0.5 * ch.alpha[k][i]);
            let bound = 10.0 * h * 0.04 * 0.04;
            assert!((ch.mart_stat[k][i] - moment).abs() <= bound);
        }
    }

    #[test]
    fn reference_chain_has_zero_entropy() {
        let r = reference(8.0, 5.0);
        let chain = MarkovChain::from_reference(&r);
        let e = specific_entropy_of_chain(&chain, &r).unwrap();
        assert!(e.h_kl.abs() < 1e-12);
        assert!(e.s_limit.abs() < 1e-6);
    }

    #[test]
    fn normal_kl_values() {
        let h: f64 = 0.01;
        let v = normal_kl(0.0, (2.0 * h).sqrt(), 0.0, h.sqrt());
        assert!((v - 0.153_426_409_720_027_35).abs() < 1e-15);
        assert_eq!(normal_kl(0.3, 1.2, 0.3, 1.2), 0.0);
    }

    #[test]
    fn drift_increases_martingale_error() {
        let base = reference(10.0, 6.0);
        let mut errs = Vec::new();
        for drift in [0.0, 0.01, 0.03] {
            let kernels = crate::discretization::build_reference_kernels(
                &base.grids,
                &base.time_grid,
                &base.ref_vol,
                crate::discretization::ReferenceDrift::Constant(-0.02 + drift),
                base.delta,
            )
            .unwrap();
            let chain = MarkovChain::from_kernels(&base.grids, base.h(), &base.nu0, &kernels);
            let ch = chain.characteristics();
            errs.push(martingale_error_l2(base.h(), &chain.marginals[..10], &ch.mart_stat));
        }
        assert!(errs[0] < 1e-5, "{errs:?}");
        assert!(errs[1] > errs[0] && errs[2] > errs[1]);
        assert!((errs[1] - 0.01).abs() < 1e-3);
    }

    #[test]
    fn masked_points_report_zeros() {
        let r = reference(4.0, 5.0);
        let chain = MarkovChain::from_reference(&r);
        let ch = chain.characteristics();
        // the Dirac initial law leaves every other point of grid 0 without mass
        let masked = ch.mask[0].iter().filter(|m| **m).count();
        assert_eq!(masked, r.grids[0].len - 1);
        for (i, m) in ch.mask[0].iter().enumerate() {
            if *m {
                assert_eq!((ch.beta[0][i], ch.alpha[0][i], ch.local_vol[0][i]), (0.0, 0.0, 0.0));
            }
        }
    }
}
