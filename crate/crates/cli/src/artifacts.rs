//! CSV, JSON and SVG outputs of a run. Everything except the `wall_ms`
//! column is a pure function of the config.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use smot_core::diagnostics::EntropyReport;
use smot_core::solver::RunStatus;

use crate::svg::{LinePlot, Series};
use crate::{CalibrationRun, CliError};

pub const CONVERGENCE_HEADER: &str = "sweep,level,n_timesteps,dual_value,e_max,price_err_l2,mart_err_l2,wall_ms";
pub const SMILE_HEADER: &str = "strike,kind,target_price,model_price,market_iv,model_iv";

const MART_ERROR_NOTE: &str = "mart_err_l2 = sqrt(h * sum_k sum_x nu_k(x) * b_k(x)^2) with normalised marginals, \
so it approximates the time integral of E[b^2] and is comparable across time steps";

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per sweep over all levels; `sweep` counts globally from 1.
pub fn convergence_csv(run: &CalibrationRun) -> String {
    let mut out = String::from(CONVERGENCE_HEADER);
    out.push('\n');
    let mut sweep = 0;
    for (level, lv) in run.levels.iter().enumerate() {
        for r in &lv.outcome.reports {
            sweep += 1;
            let _ = writeln!(
                out,
                "{sweep},{level},{},{},{},{},{},{:.3}",
                lv.n_points - 1,
                r.dual_value,
                r.e_max,
                r.price_error_l2,
                r.martingale_error_l2,
                r.wall_time.as_secs_f64() * 1e3
            );
        }
    }
    out
}

/// Global sweep index at which each level after the first starts.
pub fn level_boundaries(run: &CalibrationRun) -> Vec<usize> {
    let mut out = Vec::new();
    let mut total = 0;
    for lv in &run.levels {
        if total > 0 {
            out.push(total + 1);
        }
        total += lv.outcome.reports.len();
    }
    out
}

/// Instrument indices of one maturity, sorted by strike.
fn maturity_indices(run: &CalibrationRun, maturity: f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..run.quotes.len()).filter(|&i| run.quotes[i].maturity == maturity).collect();
    idx.sort_by(|&a, &b| run.quotes[a].strike.total_cmp(&run.quotes[b].strike));
    idx
}

pub fn smile_csv(run: &CalibrationRun, maturity: f64) -> String {
    let mut out = String::from(SMILE_HEADER);
    out.push('\n');
    let ins = &run.levels.last().expect("non-empty").problem.instruments;
    for i in maturity_indices(run, maturity) {
        let q = &run.quotes[i];
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            q.strike,
            ins[i].kind.as_str(),
            q.price,
            run.result.model_prices[i],
            q.implied_vol,
            opt(run.result.model_implied_vols[i])
        );
    }
    out
}

/// Unmasked points of the extracted local vol on the finest level.
pub fn local_vol_csv(run: &CalibrationRun) -> String {
    let mut out = String::from("t,x,sigma\n");
    let ch = &run.result.characteristics;
    for (k, sig) in ch.local_vol.iter().enumerate() {
        for (i, s) in sig.iter().enumerate() {
            if !ch.mask[k][i] {
                let _ = writeln!(out, "{},{},{}", run.result.times[k], run.result.grids_x[k][i], s);
            }
        }
    }
    out
}

/// Marginal `k` as a density: point mass divided by the grid spacing.
pub fn marginal_csv(run: &CalibrationRun, k: usize) -> String {
    let dx = run.levels.last().expect("non-empty").problem.reference.grids[k].dx;
    let mut out = String::from("x,density\n");
    for (x, m) in run.result.grids_x[k].iter().zip(&run.result.marginals[k]) {
        let _ = writeln!(out, "{},{}", x, m / dx);
    }
    out
}

#[derive(Debug, Serialize)]
struct LevelSummary {
    n_points: usize,
    n_timesteps: usize,
    status: RunStatus,
    sweeps: usize,
    anderson_accepted: usize,
    anderson_rejected: usize,
    final_e_max: f64,
    final_dual_value: f64,
    price_err_l2: f64,
    mart_err_l2: f64,
}

#[derive(Debug, Serialize)]
struct Summary {
    status: RunStatus,
    exit_code: i32,
    instruments: usize,
    levels: Vec<LevelSummary>,
    initial_price_err_l2: f64,
    price_err_l2: f64,
    mart_err_l2: f64,
    max_abs_iv_error: Option<f64>,
    instruments_without_model_iv: usize,
    specific_entropy: EntropyReport,
    mart_err_note: &'static str,
    config: serde_json::Value,
}

fn max_iv_error(run: &CalibrationRun) -> (Option<f64>, usize) {
    let mut worst: Option<f64> = None;
    let mut missing = 0;
    for (q, iv) in run.quotes.iter().zip(&run.result.model_implied_vols) {
        match iv {
            Some(v) => {
                let e = (v - q.implied_vol).abs();
                worst = Some(worst.map_or(e, |w| w.max(e)));
            }
            None => missing += 1,
        }
    }
    (worst, missing)
}

/// Run summary without timings; output location keys are left out so that
/// the file does not depend on where it is written.
pub fn summary_json(run: &CalibrationRun) -> String {
    let levels = run
        .levels
        .iter()
        .map(|lv| {
            let last = lv.outcome.reports.last();
            LevelSummary {
                n_points: lv.n_points,
                n_timesteps: lv.n_points - 1,
                status: lv.outcome.status,
                sweeps: lv.outcome.reports.len(),
                anderson_accepted: lv.accel.accepted,
                anderson_rejected: lv.accel.rejected,
                final_e_max: last.map_or(f64::NAN, |r| r.e_max),
                final_dual_value: last.map_or(f64::NAN, |r| r.dual_value),
                price_err_l2: last.map_or(f64::NAN, |r| r.price_error_l2),
                mart_err_l2: last.map_or(f64::NAN, |r| r.martingale_error_l2),
            }
        })
        .collect();
    let mut config = serde_json::to_value(&run.config).expect("config serialises");
    if let Some(map) = config.as_object_mut() {
        map.remove("output_dir");
        map.remove("emit_plots");
    }
    let (max_abs_iv_error, instruments_without_model_iv) = max_iv_error(run);
    let summary = Summary {
        status: run.status(),
        exit_code: run.exit_code(),
        instruments: run.quotes.len(),
        levels,
        initial_price_err_l2: run.levels[0].outcome.reports.first().map_or(f64::NAN, |r| r.price_error_l2),
        price_err_l2: run.result.price_error_l2,
        mart_err_l2: run.result.martingale_error_l2,
        max_abs_iv_error,
        instruments_without_model_iv,
        specific_entropy: run.result.specific_entropy,
        mart_err_note: MART_ERROR_NOTE,
        config,
    };
    let mut s = serde_json::to_string_pretty(&summary).expect("summary serialises");
    s.push('\n');
    s
}

pub fn convergence_plot(run: &CalibrationRun) -> String {
    let mut price = Vec::new();
    let mut mart = Vec::new();
    let mut sweep = 0;
    for lv in &run.levels {
        for r in &lv.outcome.reports {
            sweep += 1;
            price.push((sweep as f64, r.price_error_l2));
            mart.push((sweep as f64, r.martingale_error_l2));
        }
    }
    LinePlot {
        title: "Convergence (dashed bars: grid refinements)".into(),
        x_label: "sweep".into(),
        y_label: "L2 error".into(),
        log_y: true,
        series: vec![Series::line("price error", price), Series::line("martingale error", mart)],
        vlines: level_boundaries(run).iter().map(|&b| b as f64 - 0.5).collect(),
    }
    .render()
}

pub fn smile_plot(run: &CalibrationRun, maturity: f64) -> String {
    let idx = maturity_indices(run, maturity);
    let market = idx.iter().map(|&i| (run.quotes[i].strike, run.quotes[i].implied_vol)).collect();
    let model = idx
        .iter()
        .filter_map(|&i| Some((run.quotes[i].strike, run.result.model_implied_vols[i]?)))
        .collect();
    LinePlot {
        title: format!("Implied vol, T = {maturity}"),
        x_label: "strike".into(),
        y_label: "implied vol".into(),
        log_y: false,
        series: vec![Series::line("market", market), Series::markers("model", model)],
        vlines: Vec::new(),
    }
    .render()
}

/// Local vol slices at the timesteps just before each maturity.
pub fn local_vol_plot(run: &CalibrationRun) -> String {
    let last = run.levels.last().expect("non-empty");
    let tg = &last.problem.reference.time_grid;
    let ch = &run.result.characteristics;
    let mut series = Vec::new();
    for &m in &run.config.maturities {
        let Ok(k) = tg.index_of(m) else { continue };
        let k = k.saturating_sub(1).min(ch.local_vol.len().saturating_sub(1));
        let pts = (0..ch.local_vol[k].len())
            .filter(|&i| !ch.mask[k][i])
            .map(|i| (run.result.grids_x[k][i].exp(), ch.local_vol[k][i]))
            .collect();
        series.push(Series::line(format!("t = {}", run.result.times[k]), pts));
    }
    LinePlot {
        title: "Local volatility".into(),
        x_label: "spot level".into(),
        y_label: "sigma".into(),
        log_y: false,
        series,
        vlines: Vec::new(),
    }
    .render()
}

fn distinct_maturities(run: &CalibrationRun) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for q in &run.quotes {
        if !out.contains(&q.maturity) {
            out.push(q.maturity);
        }
    }
    out
}

/// Writes the full artifact set into `dir` (created if missing) and
/// returns the written paths in a fixed order.
pub fn write_artifacts(run: &CalibrationRun, dir: &Path, plots: bool) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut files: Vec<(String, String)> = vec![
        ("convergence.csv".into(), convergence_csv(run)),
        ("local_vol.csv".into(), local_vol_csv(run)),
        ("summary.json".into(), summary_json(run)),
    ];
    for m in distinct_maturities(run) {
        files.push((format!("smile_{m}.csv"), smile_csv(run, m)));
    }
    for k in 0..run.result.marginals.len() {
        files.push((format!("marginal_{k}.csv"), marginal_csv(run, k)));
    }
    if plots {
        files.push(("convergence.svg".into(), convergence_plot(run)));
        files.push(("local_vol.svg".into(), local_vol_plot(run)));
        for m in distinct_maturities(run) {
            files.push((format!("smile_{m}.svg"), smile_plot(run, m)));
        }
    }
    let mut written = Vec::with_capacity(files.len());
    for (name, body) in files {
        let path = dir.join(name);
        write_file(&path, &body)?;
        written.push(path);
    }
    Ok(written)
}
