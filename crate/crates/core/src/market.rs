//! Synthetic option market: SSVI implied total variance, undiscounted
//! Black–Scholes prices, implied-vol inversion and the payoffs used as
//! calibration statistics.
//!
//! Rates are zero throughout, so every price is a forward price and the
//! forward equals the spot.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SmotError};
use crate::numerics::{norm_cdf, norm_pdf};

/// Observation times of the reference experiment.
pub const DEFAULT_MATURITIES: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

/// Largest strike index per maturity of the reference experiment; maturity
/// `i` carries `counts[i] + 1` calls and as many puts.
pub const DEFAULT_STRIKE_COUNTS: [usize; 5] = [5, 7, 9, 10, 12];

/// Power-law SSVI surface: `θ_t = theta_slope·t`, `φ(θ) = eta·θ^(-lam)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsviParams {
    pub eta: f64,
    pub lam: f64,
    pub rho: f64,
    pub theta_slope: f64,
}

impl Default for SsviParams {
    fn default() -> Self {
        Self {
            eta: 1.6,
            lam: 0.4,
            rho: -0.15,
            theta_slope: 0.04,
        }
    }
}

impl SsviParams {
    pub fn new(eta: f64, lam: f64, rho: f64, theta_slope: f64) -> Result<Self> {
        let p = Self {
            eta,
            lam,
            rho,
            theta_slope,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.eta.is_finite()
            && self.eta > 0.0
            && self.lam > 0.0
            && self.lam < 1.0
            && self.rho.abs() < 1.0
            && self.theta_slope.is_finite()
            && self.theta_slope > 0.0;
        if ok {
            Ok(())
        } else {
            Err(SmotError::InvalidParameter(format!(
                "SSVI parameters out of range: {self:?}"
            )))
        }
    }

    /// ATM total variance at time `t`.
    pub fn theta(&self, t: f64) -> f64 {
        self.theta_slope * t
    }

    fn phi(&self, theta: f64) -> f64 {
        self.eta * theta.powf(-self.lam)
    }
}

/// SSVI total implied variance `w(k, t)` at log-moneyness `k = log(K/F)`.
pub fn ssvi_total_variance(params: &SsviParams, log_moneyness: f64, t: f64) -> Result<f64> {
    if !log_moneyness.is_finite() || !t.is_finite() {
        return Err(SmotError::NonFinite("ssvi_total_variance input"));
    }
    if t <= 0.0 {
        return Err(SmotError::InvalidParameter(format!(
            "SSVI evaluated at non-positive time {t}"
        )));
    }
    let theta = params.theta(t);
    let pk = params.phi(theta) * log_moneyness;
    let rho = params.rho;
    let root = ((pk + rho).powi(2) + 1.0 - rho * rho).sqrt();
    Ok(0.5 * theta * (1.0 + rho * pk + root))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptionKind {
    Call,
    Put,
}

impl OptionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OptionKind::Call => "call",
            OptionKind::Put => "put",
        }
    }
}

/// A calibration target. The maturity is stored as a time; the timestep
/// index is resolved against a concrete [`crate::discretization::TimeGrid`],
/// since multiscale runs see the same instrument on several grids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Instrument {
    pub maturity: f64,
    pub strike: f64,
    pub kind: OptionKind,
    pub target_price: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptionQuote {
    pub maturity: f64,
    pub strike: f64,
    pub price: f64,
    pub implied_vol: f64,
}

/// Payoff of a vanilla option as a function of the log-price `x`.
#[inline]
pub fn payoff(kind: OptionKind, strike: f64, x: f64) -> f64 {
    match kind {
        OptionKind::Call => (x.exp() - strike).max(0.0),
        OptionKind::Put => (strike - x.exp()).max(0.0),
    }
}

/// Undiscounted Black–Scholes price from total variance `w = σ²t`.
pub fn black_scholes_price(forward: f64, strike: f64, total_variance: f64, kind: OptionKind) -> f64 {
    if total_variance <= 0.0 {
        return match kind {
            OptionKind::Call => (forward - strike).max(0.0),
            OptionKind::Put => (strike - forward).max(0.0),
        };
    }
    let sd = total_variance.sqrt();
    let d1 = ((forward / strike).ln() + 0.5 * total_variance) / sd;
    let d2 = d1 - sd;
    match kind {
        OptionKind::Call => forward * norm_cdf(d1) - strike * norm_cdf(d2),
        OptionKind::Put => strike * norm_cdf(-d2) - forward * norm_cdf(-d1),
    }
}

fn arbitrage_bounds(forward: f64, strike: f64, kind: OptionKind) -> (f64, f64) {
    match kind {
        OptionKind::Call => ((forward - strike).max(0.0), forward),
        OptionKind::Put => ((strike - forward).max(0.0), strike),
    }
}

const VOL_LO: f64 = 1e-6;
const VOL_HI: f64 = 5.0;
const PRICE_TOL: f64 = 1e-12;

/// Black–Scholes implied volatility by bisection on `[1e-6, 5]` followed by
/// a Newton polish kept inside the bracket.
pub fn implied_vol(forward: f64, strike: f64, t: f64, price: f64, kind: OptionKind) -> Result<f64> {
    if !(forward > 0.0 && strike > 0.0 && t > 0.0) || !price.is_finite() {
        return Err(SmotError::InvalidParameter(format!(
            "implied_vol(forward={forward}, strike={strike}, t={t}, price={price})"
        )));
    }
    let (lower, upper) = arbitrage_bounds(forward, strike, kind);
    if price <= lower || price >= upper {
        return Err(SmotError::PriceOutOfBounds {
            price,
            lower,
            upper,
        });
    }
    let err = |vol: f64| black_scholes_price(forward, strike, vol * vol * t, kind) - price;

    let mut lo = VOL_LO;
    let mut hi = VOL_HI;
    // Prices a hair above intrinsic map below the nominal bracket.
    while err(lo) > 0.0 {
        lo *= 0.1;
        if lo < 1e-300 {
            return Ok(lo);
        }
    }
    while err(hi) < 0.0 {
        hi *= 2.0;
        if hi > 1e3 {
            return Err(SmotError::PriceOutOfBounds {
                price,
                lower,
                upper,
            });
        }
    }

    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let e = err(mid);
        if e.abs() <= PRICE_TOL {
            return Ok(mid);
        }
        if e > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-7 * hi {
            break;
        }
    }

    let mut vol = 0.5 * (lo + hi);
    for _ in 0..50 {
        let e = err(vol);
        if e.abs() <= PRICE_TOL {
            break;
        }
        if e > 0.0 {
            hi = vol;
        } else {
            lo = vol;
        }
        let w = vol * vol * t;
        let d1 = ((forward / strike).ln() + 0.5 * w) / w.sqrt();
        let vega = forward * norm_pdf(d1) * t.sqrt();
        let mut next = vol - e / vega;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - vol).abs() <= 1e-16 * vol {
            vol = next;
            break;
        }
        vol = next;
    }
    Ok(vol)
}

/// SSVI + Black–Scholes target price for a single contract.
pub fn ssvi_price(params: &SsviParams, forward: f64, strike: f64, t: f64, kind: OptionKind) -> Result<f64> {
    let w = ssvi_total_variance(params, (strike / forward).ln(), t)?;
    Ok(black_scholes_price(forward, strike, w, kind))
}

/// Out-of-the-money strip: calls at `S₀+1+4j` and puts at `S₀−1−4j` for
/// `j = 0..=counts[i]` at maturity `maturities[i]`.
pub fn generate_instruments(
    params: &SsviParams,
    spot: f64,
    maturities: &[f64],
    counts: &[usize],
) -> Result<Vec<Instrument>> {
    if !(spot > 0.0) {
        return Err(SmotError::InvalidParameter(format!("spot must be positive, got {spot}")));
    }
    if maturities.len() != counts.len() {
        return Err(SmotError::InvalidParameter(
            "one strike count per maturity required".into(),
        ));
    }
    params.validate()?;
    let mut out = Vec::new();
    for (&t, &n) in maturities.iter().zip(counts) {
        for kind in [OptionKind::Call, OptionKind::Put] {
            for j in 0..=n {
                let offset = 1.0 + 4.0 * j as f64;
                let strike = match kind {
                    OptionKind::Call => spot + offset,
                    OptionKind::Put => spot - offset,
                };
                if strike <= 0.0 {
                    continue;
                }
                out.push(Instrument {
                    maturity: t,
                    strike,
                    kind,
                    target_price: ssvi_price(params, spot, strike, t, kind)?,
                });
            }
        }
    }
    Ok(out)
}

/// The reference instrument set: five maturities, 48 calls and 48 puts for `S₀ = 100`.
pub fn generate_synthetic_instruments(params: &SsviParams, spot: f64) -> Result<Vec<Instrument>> {
    generate_instruments(params, spot, &DEFAULT_MATURITIES, &DEFAULT_STRIKE_COUNTS)
}

/// Market quotes (price and SSVI implied vol) for a set of instruments.
pub fn market_quotes(params: &SsviParams, spot: f64, instruments: &[Instrument]) -> Result<Vec<OptionQuote>> {
    instruments
        .iter()
        .map(|ins| {
            let w = ssvi_total_variance(params, (ins.strike / spot).ln(), ins.maturity)?;
            Ok(OptionQuote {
                maturity: ins.maturity,
                strike: ins.strike,
                price: ins.target_price,
                implied_vol: (w / ins.maturity).sqrt(),
            })
        })
        .collect()
}
