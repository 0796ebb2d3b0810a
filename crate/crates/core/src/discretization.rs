//! Time grid, truncated spatial grids, banded Euler–Maruyama reference
//! kernels and the initial law.
//!
//! All spatial grids of a [`ReferenceMeasure`] live on one lattice
//! `x0 + j·dx`, so the displacement between a source and a destination
//! point is always an integer number of cells. Kernel rows are stored as
//! views into shared Gaussian templates: with a constant reference
//! volatility every row of a timestep uses the same template and only the
//! boundary rows differ, by clipping and renormalisation.

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SmotError};
use crate::numerics::log_sum_exp;

const MATURITY_REL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub n_steps: usize,
    pub h: f64,
    pub horizon: f64,
    maturity_map: Vec<(f64, usize)>,
}

impl TimeGrid {
    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.h
    }

    /// Maturities registered at construction with their timestep indices.
    pub fn maturity_map(&self) -> &[(f64, usize)] {
        &self.maturity_map
    }

    /// Timestep index of `t`; fails unless `t` sits on the grid.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let off = || SmotError::MaturityOffGrid {
            maturity: t,
            step: self.h,
        };
        if !t.is_finite() || t < 0.0 {
            return Err(off());
        }
        let r = t / self.h;
        let k = r.round();
        if (r - k).abs() > MATURITY_REL_TOL * r.max(1.0) || k as usize > self.n_steps {
            return Err(off());
        }
        Ok(k as usize)
    }
}

pub fn build_time_grid(horizon: f64, n_steps: usize, maturities: &[f64]) -> Result<TimeGrid> {
    if !(horizon > 0.0) || !horizon.is_finite() || n_steps == 0 {
        return Err(SmotError::InvalidParameter(format!(
            "time grid needs a positive horizon and at least one step (T={horizon}, N={n_steps})"
        )));
    }
    let mut grid = TimeGrid {
        n_steps,
        h: horizon / n_steps as f64,
        horizon,
        maturity_map: Vec::with_capacity(maturities.len()),
    };
    for &t in maturities {
        let k = grid.index_of(t)?;
        grid.maturity_map.push((t, k));
    }
    Ok(grid)
}

/// Piecewise-linear volatility surface on per-time uniform x-slices,
/// clamped outside its support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolSurface {
    pub times: Vec<f64>,
    pub slices: Vec<VolSlice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolSlice {
    pub x_start: f64,
    pub dx: f64,
    pub values: Vec<f64>,
}

impl VolSlice {
    fn eval(&self, x: f64) -> f64 {
        let n = self.values.len();
        if n == 1 {
            return self.values[0];
        }
        let u = ((x - self.x_start) / self.dx).clamp(0.0, (n - 1) as f64);
        let i = (u.floor() as usize).min(n - 2);
        let w = u - i as f64;
        self.values[i] * (1.0 - w) + self.values[i + 1] * w
    }
}

impl VolSurface {
    pub fn new(times: Vec<f64>, slices: Vec<VolSlice>) -> Result<Self> {
        if times.is_empty() || times.len() != slices.len() {
            return Err(SmotError::InvalidParameter("vol surface needs one slice per time".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SmotError::InvalidParameter("vol surface times must increase".into()));
        }
        for s in &slices {
            if s.values.is_empty() || !(s.dx > 0.0) || s.values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(SmotError::InvalidParameter("vol surface slice must hold positive finite values".into()));
            }
        }
        Ok(Self { times, slices })
    }

    pub fn sigma(&self, x: f64, t: f64) -> f64 {
        let n = self.times.len();
        if t <= self.times[0] || n == 1 {
            return self.slices[0].eval(x);
        }
        if t >= self.times[n - 1] {
            return self.slices[n - 1].eval(x);
        }
        let i = self.times.partition_point(|&s| s <= t) - 1;
        let w = (t - self.times[i]) / (self.times[i + 1] - self.times[i]);
        self.slices[i].eval(x) * (1.0 - w) + self.slices[i + 1].eval(x) * w
    }

    fn min_at(&self, t: f64) -> f64 {
        let n = self.times.len();
        let i = self.times.partition_point(|&s| s <= t).saturating_sub(1).min(n - 1);
        let j = (i + 1).min(n - 1);
        let lo = |s: &VolSlice| s.values.iter().copied().fold(f64::INFINITY, f64::min);
        lo(&self.slices[i]).min(lo(&self.slices[j]))
    }
}

/// Volatility σ̄(x, t) of the reference diffusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ReferenceVol {
    Constant(f64),
    Surface(VolSurface),
}

impl ReferenceVol {
    pub fn sigma(&self, x: f64, t: f64) -> f64 {
        match self {
            ReferenceVol::Constant(s) => *s,
            ReferenceVol::Surface(s) => s.sigma(x, t),
        }
    }

    /// Smallest volatility at time `t`; sets the common lattice spacing.
    pub fn min_at(&self, t: f64) -> f64 {
        match self {
            ReferenceVol::Constant(s) => *s,
            ReferenceVol::Surface(s) => s.min_at(t),
        }
    }
}

/// Drift μ̄ of the reference diffusion as a function of its volatility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ReferenceDrift {
    /// `μ̄ = −σ̄²/2`: the exponential of the log-price is a martingale.
    LogMartingale,
    Zero,
    Constant(f64),
}

impl ReferenceDrift {
    #[inline]
    pub fn mu(&self, sigma: f64) -> f64 {
        match self {
            ReferenceDrift::LogMartingale => -0.5 * sigma * sigma,
            ReferenceDrift::Zero => 0.0,
            ReferenceDrift::Constant(m) => *m,
        }
    }
}

/// Uniform grid of points `origin + (first + i)·dx`, `i < len`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    pub origin: f64,
    pub dx: f64,
    pub first: i64,
    pub len: usize,
    /// Drift-adjusted centre of the truncation window.
    pub center: f64,
    /// `δ·v_k`.
    pub half_width: f64,
    /// Reference standard deviation `v_k` accumulated up to this timestep.
    pub std_dev: f64,
}

impl SpatialGrid {
    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        self.origin + (self.first + i as i64) as f64 * self.dx
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.x(i)).collect()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Index of the grid point nearest to `x`, clamped to the grid.
    pub fn nearest(&self, x: f64) -> usize {
        let j = ((x - self.origin) / self.dx).round() as i64 - self.first;
        j.clamp(0, self.len as i64 - 1) as usize
    }
}

/// Builds the truncated grids `[c_k − δv_k, c_k + δv_k]`, where
/// `v_k = sqrt(v0² + h·Σ_{l≤k} σ̄_l²)` and `c_k` follows the reference
/// drift from `x_center`. The common spacing is `min_k σ̄_k·sqrt(h)/k_pts`.
pub fn build_spatial_grids(
    time_grid: &TimeGrid,
    ref_vol: &ReferenceVol,
    drift: ReferenceDrift,
    v0: f64,
    delta: f64,
    k_pts: f64,
    x_center: f64,
) -> Result<Vec<SpatialGrid>> {
    if !(delta > 0.0) || !(k_pts >= 1.0) || !(v0 >= 0.0) || !x_center.is_finite() {
        return Err(SmotError::InvalidParameter(format!(
            "spatial grid parameters out of range (delta={delta}, K={k_pts}, v0={v0}, x0={x_center})"
        )));
    }
    let h = time_grid.h;
    let n = time_grid.n_steps;
    let dx = (0..=n)
        .map(|k| ref_vol.min_at(time_grid.time(k)))
        .fold(f64::INFINITY, f64::min)
        * h.sqrt()
        / k_pts;
    if !(dx > 0.0) || !dx.is_finite() {
        return Err(SmotError::InvalidParameter("reference volatility must be positive".into()));
    }

    let mut grids = Vec::with_capacity(n + 1);
    let mut center = x_center;
    let mut var = v0 * v0;
    for k in 0..=n {
        let t = time_grid.time(k);
        let sigma = ref_vol.sigma(center, t);
        var += h * sigma * sigma;
        let std_dev = var.sqrt();
        let half_width = delta * std_dev;
        let lo = ((center - half_width - x_center) / dx).floor() as i64;
        let hi = ((center + half_width - x_center) / dx).ceil() as i64;
        grids.push(SpatialGrid {
            origin: x_center,
            dx,
            first: lo,
            len: (hi - lo + 1) as usize,
            center,
            half_width,
            std_dev,
        });
        center += drift.mu(sigma) * h;
    }
    Ok(grids)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct KernelRow {
    start: u32,
    len: u32,
    template: u32,
    skip: u32,
    log_norm: f64,
}

/// One row of a kernel: destination indices `start..start + log_w.len()`
/// with `log P̄(x, y_j) = log_w[j - start] - log_norm`.
#[derive(Debug, Clone, Copy)]
pub struct RowView<'a> {
    pub start: usize,
    pub log_w: &'a [f64],
    pub log_norm: f64,
    /// Lattice displacement `(y_start − x)/dx` of the first destination.
    pub first_offset: i64,
}

impl RowView<'_> {
    pub fn len(&self) -> usize {
        self.log_w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_w.is_empty()
    }

    pub fn end(&self) -> usize {
        self.start + self.log_w.len()
    }
}

/// Banded transition matrix `P̄_{k,k+1}` between two consecutive grids.
#[derive(Debug, Clone)]
pub struct TransitionKernel {
    rows: Vec<KernelRow>,
    templates: Vec<Vec<f64>>,
    cols: Vec<(u32, u32)>,
    src_first: i64,
    dst_first: i64,
    offset_min: i64,
    offset_max: i64,
    dx: f64,
    n_dst: usize,
}

impl TransitionKernel {
    pub fn n_src(&self) -> usize {
        self.rows.len()
    }

    pub fn n_dst(&self) -> usize {
        self.n_dst
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    #[inline]
    pub fn row(&self, i: usize) -> RowView<'_> {
        let r = &self.rows[i];
        let t = &self.templates[r.template as usize];
        let skip = r.skip as usize;
        RowView {
            start: r.start as usize,
            log_w: &t[skip..skip + r.len as usize],
            log_norm: r.log_norm,
            first_offset: self.dst_first + r.start as i64 - self.src_first - i as i64,
        }
    }

    /// Source rows whose band may reach destination `j` (a superset when
    /// bands are not monotone in the source index).
    #[inline]
    pub fn source_range(&self, j: usize) -> Range<usize> {
        let (lo, hi) = self.cols[j];
        lo as usize..hi as usize
    }

    /// Lattice displacement between source `i` and destination `j`.
    #[inline]
    pub fn offset(&self, i: usize, j: usize) -> i64 {
        self.dst_first + j as i64 - self.src_first - i as i64
    }

    /// Inclusive range of lattice displacements over all rows.
    pub fn offset_range(&self) -> (i64, i64) {
        (self.offset_min, self.offset_max)
    }

    pub fn log_weight(&self, i: usize, j: usize) -> Option<f64> {
        let row = self.row(i);
        (j >= row.start && j < row.end()).then(|| row.log_w[j - row.start] - row.log_norm)
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.log_weight(i, j).map_or(0.0, f64::exp)
    }

    /// Whether the grid boundary cut part of row `i`'s band.
    pub fn is_clipped(&self, i: usize) -> bool {
        let r = &self.rows[i];
        r.len as usize != self.templates[r.template as usize].len()
    }

    /// Number of stored (row, destination) pairs.
    pub fn nnz(&self) -> usize {
        self.rows.iter().map(|r| r.len as usize).sum()
    }

    pub fn n_templates(&self) -> usize {
        self.templates.len()
    }
}

/// Gaussian Euler–Maruyama kernels truncated to `|y − x − μ̄h| ≤ δσ̄√h`
/// and renormalised per row.
pub fn build_reference_kernels(
    grids: &[SpatialGrid],
    time_grid: &TimeGrid,
    ref_vol: &ReferenceVol,
    drift: ReferenceDrift,
    delta: f64,
) -> Result<Vec<TransitionKernel>> {
    if grids.len() != time_grid.n_steps + 1 {
        return Err(SmotError::GridMismatch(format!(
            "{} spatial grids for {} timesteps",
            grids.len(),
            time_grid.n_steps
        )));
    }
    let h = time_grid.h;
    let sqrt_h = h.sqrt();
    let mut kernels = Vec::with_capacity(time_grid.n_steps);
    for k in 0..time_grid.n_steps {
        let (src, dst) = (&grids[k], &grids[k + 1]);
        if src.dx != dst.dx || src.origin != dst.origin {
            return Err(SmotError::GridMismatch(format!("grids {k} and {} are on different lattices", k + 1)));
        }
        let dx = src.dx;
        let t = time_grid.time(k);
        let dst_last = dst.first + dst.len as i64 - 1;

        let mut templates: Vec<Vec<f64>> = Vec::new();
        let mut lookup: HashMap<(u64, u64), (u32, i64)> = HashMap::new();
        let mut rows = Vec::with_capacity(src.len);
        let mut offset_min = i64::MAX;
        let mut offset_max = i64::MIN;
        for i in 0..src.len {
            let x = src.x(i);
            let sigma = ref_vol.sigma(x, t);
            let shift = drift.mu(sigma) * h;
            let s = sigma * sqrt_h;
            let (tid, o_lo) = *lookup.entry((sigma.to_bits(), shift.to_bits())).or_insert_with(|| {
                let o_lo = ((shift - delta * s) / dx - 1e-9).ceil() as i64;
                let o_hi = ((shift + delta * s) / dx + 1e-9).floor() as i64;
                let tpl = (o_lo..=o_hi)
                    .map(|o| {
                        let z = (o as f64 * dx - shift) / s;
                        -0.5 * z * z
                    })
                    .collect();
                templates.push(tpl);
                ((templates.len() - 1) as u32, o_lo)
            });
            let tpl_len = templates[tid as usize].len() as i64;
            let g = src.first + i as i64;
            let lo = (g + o_lo).max(dst.first);
            let hi = (g + o_lo + tpl_len - 1).min(dst_last);
            if hi < lo {
                return Err(SmotError::EmptyBand { timestep: k, row: i });
            }
            let skip = (lo - (g + o_lo)) as usize;
            let len = (hi - lo + 1) as usize;
            let log_norm = log_sum_exp(&templates[tid as usize][skip..skip + len]);
            offset_min = offset_min.min(lo - g);
            offset_max = offset_max.max(hi - g);
            rows.push(KernelRow {
                start: (lo - dst.first) as u32,
                len: len as u32,
                template: tid,
                skip: skip as u32,
                log_norm,
            });
        }

        let mut cols = vec![(u32::MAX, 0u32); dst.len];
        for (i, r) in rows.iter().enumerate() {
            for c in &mut cols[r.start as usize..(r.start + r.len) as usize] {
                c.0 = c.0.min(i as u32);
                c.1 = c.1.max(i as u32 + 1);
            }
        }
        for c in &mut cols {
            if c.0 == u32::MAX {
                *c = (0, 0);
            }
        }

        kernels.push(TransitionKernel {
            rows,
            templates,
            cols,
            src_first: src.first,
            dst_first: dst.first,
            offset_min,
            offset_max,
            dx,
            n_dst: dst.len,
        });
    }
    Ok(kernels)
}

/// Initial law on `grid0`: a point mass at the grid point nearest `x0` when
/// `v0 = 0`, otherwise a renormalised discrete Gaussian of width `v0`.
pub fn build_initial_density(grid0: &SpatialGrid, x0: f64, v0: f64) -> Result<Vec<f64>> {
    let lo = grid0.x(0);
    let hi = grid0.x(grid0.len - 1);
    if !(x0 >= lo - 0.5 * grid0.dx && x0 <= hi + 0.5 * grid0.dx) {
        return Err(SmotError::InvalidParameter(format!(
            "initial point {x0} outside grid [{lo}, {hi}]"
        )));
    }
    let mut nu = vec![0.0; grid0.len];
    if v0 == 0.0 {
        nu[grid0.nearest(x0)] = 1.0;
        return Ok(nu);
    }
    if !(v0 > 0.0) {
        return Err(SmotError::InvalidParameter(format!("initial width must be >= 0, got {v0}")));
    }
    let logs: Vec<f64> = (0..grid0.len)
        .map(|i| {
            let z = (grid0.x(i) - x0) / v0;
            -0.5 * z * z
        })
        .collect();
    let norm = log_sum_exp(&logs);
    for (n, l) in nu.iter_mut().zip(&logs) {
        *n = (l - norm).exp();
    }
    Ok(nu)
}

/// Everything needed to build a reference measure.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSpec {
    pub horizon: f64,
    pub n_steps: usize,
    pub maturities: Vec<f64>,
    pub x0: f64,
    pub v0: f64,
    pub delta: f64,
    pub k_pts: f64,
    pub ref_vol: ReferenceVol,
    pub drift: ReferenceDrift,
}

impl ReferenceSpec {
    /// Constant-vol log-martingale reference with the default truncation
    /// (`δ = 5`, 50 points per `σ̄√h`).
    pub fn constant_vol(spot: f64, sigma: f64, horizon: f64, n_steps: usize, maturities: &[f64]) -> Self {
        Self {
            horizon,
            n_steps,
            maturities: maturities.to_vec(),
            x0: spot.ln(),
            v0: 0.0,
            delta: 5.0,
            k_pts: 50.0,
            ref_vol: ReferenceVol::Constant(sigma),
            drift: ReferenceDrift::LogMartingale,
        }
    }
}

/// Law `P̄^h` of the discretised reference chain.
#[derive(Debug, Clone)]
pub struct ReferenceMeasure {
    pub time_grid: TimeGrid,
    pub grids: Vec<SpatialGrid>,
    pub kernels: Vec<TransitionKernel>,
    pub nu0: Vec<f64>,
    pub ref_vol: ReferenceVol,
    pub drift: ReferenceDrift,
    pub x0: f64,
    pub delta: f64,
    pub k_pts: f64,
}

impl ReferenceMeasure {
    pub fn build(spec: &ReferenceSpec) -> Result<Self> {
        let time_grid = build_time_grid(spec.horizon, spec.n_steps, &spec.maturities)?;
        let grids = build_spatial_grids(
            &time_grid,
            &spec.ref_vol,
            spec.drift,
            spec.v0,
            spec.delta,
            spec.k_pts,
            spec.x0,
        )?;
        let kernels = build_reference_kernels(&grids, &time_grid, &spec.ref_vol, spec.drift, spec.delta)?;
        let nu0 = build_initial_density(&grids[0], spec.x0, spec.v0)?;
        Ok(Self {
            time_grid,
            grids,
            kernels,
            nu0,
            ref_vol: spec.ref_vol.clone(),
            drift: spec.drift,
            x0: spec.x0,
            delta: spec.delta,
            k_pts: spec.k_pts,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.time_grid.n_steps
    }

    pub fn h(&self) -> f64 {
        self.time_grid.h
    }

    /// Total number of stored kernel entries across all timesteps.
    pub fn kernel_nnz(&self) -> usize {
        self.kernels.iter().map(TransitionKernel::nnz).sum()
    }

    pub fn total_points(&self) -> usize {
        self.grids.iter().map(SpatialGrid::len).sum()
    }

    /// Marginals of the reference chain, propagated forward from `nu0`.
    pub fn reference_marginals(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.grids.len());
        out.push(self.nu0.clone());
        for kernel in &self.kernels {
            let prev = out.last().unwrap();
            let mut next = vec![0.0; kernel.n_dst()];
            for (i, &p) in prev.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let row = kernel.row(i);
                for (m, lw) in row.log_w.iter().enumerate() {
                    next[row.start + m] += p * (lw - row.log_norm).exp();
                }
            }
            out.push(next);
        }
        out
    }
}
