//! End-to-end driver: synthetic SSVI market, multiscale calibration and
//! artifact files.

pub mod artifacts;
pub mod config;
pub mod svg;

use std::path::PathBuf;
use std::time::Instant;

use smot_core::accel::{run_multiscale, LevelOutcome, MultiscaleSchedule};
use smot_core::diagnostics::{calibration_result, CalibrationResult};
use smot_core::discretization::ReferenceSpec;
use smot_core::dual::StatisticB;
use smot_core::market::{generate_instruments, market_quotes, OptionQuote};
use smot_core::solver::{RunStatus, SolverConfig};
use smot_core::SmotError;
use thiserror::Error;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}{}: {message}", path.display(), if *line > 0 { format!(":{line}") } else { String::new() })]
    Config { path: PathBuf, line: usize, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Solver(#[from] SmotError),

    #[error("thread pool: {0}")]
    ThreadPool(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        1
    }
}

/// Everything a finished run produced, finest level last.
pub struct CalibrationRun {
    pub config: RunConfig,
    pub quotes: Vec<OptionQuote>,
    pub levels: Vec<LevelOutcome>,
    pub result: CalibrationResult,
    pub elapsed_secs: f64,
}

impl CalibrationRun {
    /// `MaxSweepsReached` if any level stopped on the sweep cap.
    pub fn status(&self) -> RunStatus {
        if self.levels.iter().all(|l| l.outcome.status == RunStatus::Converged) {
            RunStatus::Converged
        } else {
            RunStatus::MaxSweepsReached
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.status() {
            RunStatus::Converged => 0,
            RunStatus::MaxSweepsReached => 2,
        }
    }
}

pub fn solver_config(cfg: &RunConfig) -> SolverConfig {
    SolverConfig {
        epsilon: cfg.epsilon,
        max_sweeps: cfg.max_sweeps,
        newton_tol: cfg.newton_tol,
        newton_max_iter: cfg.newton_max_iter,
        c_mart: cfg.c_mart,
        w_price: cfg.w_price,
        eliminate_phi_nu: cfg.eliminate_phi_nu,
    }
}

pub fn reference_spec(cfg: &RunConfig) -> ReferenceSpec {
    let n_steps = cfg.schedule[0] - 1;
    let mut spec = ReferenceSpec::constant_vol(cfg.spot, cfg.ref_vol, cfg.horizon, n_steps, &cfg.maturities);
    spec.delta = cfg.delta;
    spec.k_pts = cfg.k_pts;
    spec
}

/// Generates the market, runs every level of the schedule and collects
/// diagnostics of the finest one. `cfg` must already be validated.
pub fn run_calibration(cfg: &RunConfig) -> Result<CalibrationRun, CliError> {
    let start = Instant::now();
    let ssvi = cfg.ssvi()?;
    let instruments = generate_instruments(&ssvi, cfg.spot, &cfg.maturities, &cfg.strike_counts)?;
    let quotes = market_quotes(&ssvi, cfg.spot, &instruments)?;
    let schedule = MultiscaleSchedule::new(cfg.schedule.clone(), cfg.refine_mode.into())?;
    let levels = run_multiscale(
        &reference_spec(cfg),
        &instruments,
        StatisticB::MartingaleExp,
        &schedule,
        &solver_config(cfg),
        cfg.anderson_depth,
    )?;
    let last = levels.last().expect("schedule has at least one level");
    let result = calibration_result(
        &last.problem,
        &last.outcome.potentials,
        &last.outcome.cache,
        last.outcome.reports.clone(),
    )?;
    Ok(CalibrationRun {
        config: cfg.clone(),
        quotes,
        levels,
        result,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}
