//! Brute-force path tensor for small instances. Every quantity is an
//! explicit sum over full paths, with no messages and no banding beyond the
//! kernels' own zeros. Used only to cross-check the message recursions.

use crate::dual::{CostParams, DualPotentials, DualProblem};
use crate::error::{Result, SmotError};
use crate::market::payoff;

pub const MAX_ENTRIES: usize = 10_000_000;

/// Path law `P(x_0, …, x_N)` stored densely, last axis fastest.
#[derive(Debug, Clone)]
pub struct DensePathTensor {
    pub values: Vec<f64>,
    pub shape: Vec<usize>,
}

impl DensePathTensor {
    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum()
    }

    fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.shape.len()];
        for a in (0..self.shape.len().saturating_sub(1)).rev() {
            s[a] = s[a + 1] * self.shape[a + 1];
        }
        s
    }
}

fn sq_over(p: &[f64], c: f64) -> f64 {
    let s: f64 = p.iter().map(|v| v * v).sum();
    if c == 0.0 {
        if s == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        s / (4.0 * c)
    }
}

/// Node exponent `φ_ν_k(x) + Σ_i Λ_{k,i}·G_i(x)/h` recomputed from the
/// instrument list.
fn node_exponent(problem: &DualProblem, pot: &DualPotentials, k: usize, i: usize) -> f64 {
    let h = problem.h();
    let x = problem.reference.grids[k].x(i);
    let mut v = pot.phi_nu[k][i];
    for (lam, &idx) in pot.lambda[k].iter().zip(&problem.constraints[k].instruments) {
        let ins = &problem.instruments[idx];
        v += lam * payoff(ins.kind, ins.strike, x) / h;
    }
    v
}

/// `ν₀(x₀)·Π_k exp(node_k)·exp(φ_m_k(x_k)·B(x_k, x_{k+1})/h)·P̄(x_k, x_{k+1})`
/// times `exp(node_N)`.
pub fn dense_tensor(problem: &DualProblem, pot: &DualPotentials) -> Result<DensePathTensor> {
    let n = problem.n_steps();
    let shape: Vec<usize> = (0..=n).map(|k| problem.grid_len(k)).collect();
    let mut entries: usize = 1;
    for &s in &shape {
        entries = entries.saturating_mul(s);
    }
    if entries > MAX_ENTRIES {
        return Err(SmotError::TooLarge {
            entries,
            limit: MAX_ENTRIES,
        });
    }
    let h = problem.h();
    let dim = problem.dim();
    let grids = &problem.reference.grids;
    let mut values: Vec<f64> = (0..shape[0])
        .map(|i| problem.reference.nu0[i] * node_exponent(problem, pot, 0, i).exp())
        .collect();
    for k in 0..n {
        let kernel = &problem.reference.kernels[k];
        let (ns, nd) = (shape[k], shape[k + 1]);
        let mut step = vec![0.0; ns * nd];
        for i in 0..ns {
            let x = grids[k].x(i);
            for j in 0..nd {
                let w = kernel.weight(i, j);
                if w == 0.0 {
                    continue;
                }
                let b = problem.statistic.eval(grids[k + 1].x(j) - x);
                let mut e = 0.0;
                for d in 0..dim {
                    e += pot.phi_m[k][i * dim + d] * b[d];
                }
                step[i * nd + j] = (e / h).exp() * w * node_exponent(problem, pot, k + 1, j).exp();
            }
        }
        let mut next = vec![0.0; values.len() * nd];
        for (p, &v) in values.iter().enumerate() {
            let i = p % ns;
            for j in 0..nd {
                next[p * nd + j] = v * step[i * nd + j];
            }
        }
        values = next;
    }
    Ok(DensePathTensor { values, shape })
}

/// Law of `X_k`: sum over every other axis.
pub fn oracle_marginal(tensor: &DensePathTensor, k: usize) -> Vec<f64> {
    let strides = tensor.strides();
    let mut out = vec![0.0; tensor.shape[k]];
    for (p, v) in tensor.values.iter().enumerate() {
        out[(p / strides[k]) % tensor.shape[k]] += v;
    }
    out
}

/// Law of `(X_k, X_{k+1})` as a dense matrix.
pub fn oracle_joint(tensor: &DensePathTensor, k: usize) -> Vec<Vec<f64>> {
    let strides = tensor.strides();
    let mut out = vec![vec![0.0; tensor.shape[k + 1]]; tensor.shape[k]];
    for (p, v) in tensor.values.iter().enumerate() {
        let i = (p / strides[k]) % tensor.shape[k];
        let j = (p / strides[k + 1]) % tensor.shape[k + 1];
        out[i][j] += v;
    }
    out
}

/// `h·Σ μ₀(φ_ν_0 − F*(−φ_m_0)) + Σ_i (Λ_i c_i − Λ_i²/(2w)) − h·Σ_paths P`,
/// or `−∞` when an interior conjugate constraint fails.
pub fn oracle_objective(
    tensor: &DensePathTensor,
    problem: &DualProblem,
    pot: &DualPotentials,
    cost: &CostParams,
) -> f64 {
    let h = problem.h();
    let n = problem.n_steps();
    let dim = problem.dim();
    for k in 1..n {
        for i in 0..problem.grid_len(k) {
            let fs = sq_over(&pot.phi_m[k][i * dim..(i + 1) * dim], cost.c_mart);
            if pot.phi_nu[k][i] < fs - 1e-12 * (1.0 + fs.abs()) {
                return f64::NEG_INFINITY;
            }
        }
    }
    if pot.phi_nu[n].iter().any(|&v| v < -1e-12) {
        return f64::NEG_INFINITY;
    }
    let mut initial = 0.0;
    for (i, &mu) in problem.mu0.iter().enumerate() {
        if mu > 0.0 {
            let fs = if n > 0 {
                sq_over(&pot.phi_m[0][i * dim..(i + 1) * dim], cost.c_mart)
            } else {
                0.0
            };
            initial += mu * (pot.phi_nu[0][i] - fs);
        }
    }
    let mut prices = 0.0;
    for (k, lams) in pot.lambda.iter().enumerate() {
        for (lam, &idx) in lams.iter().zip(&problem.constraints[k].instruments) {
            let c = problem.instruments[idx].target_price;
            prices += lam * c - lam * lam / (2.0 * cost.w_price);
        }
    }
    h * initial + prices - h * tensor.total_mass()
}
