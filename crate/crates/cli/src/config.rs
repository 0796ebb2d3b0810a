//! Run configuration: a flat JSON object whose keys all have defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use smot_core::accel::RefineMode;
use smot_core::discretization::build_time_grid;
use smot_core::market::{SsviParams, DEFAULT_MATURITIES, DEFAULT_STRIKE_COUNTS};
use smot_core::SmotError;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineModeName {
    InterpolatePotentials,
    RebuildReference,
}

impl From<RefineModeName> for RefineMode {
    fn from(m: RefineModeName) -> Self {
        match m {
            RefineModeName::InterpolatePotentials => RefineMode::InterpolatePotentials,
            RefineModeName::RebuildReference => RefineMode::RebuildReference,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub spot: f64,
    pub ref_vol: f64,
    pub horizon: f64,
    /// Number of time points per level, increasing.
    pub schedule: Vec<usize>,
    pub delta: f64,
    pub k_pts: f64,
    pub epsilon: f64,
    pub max_sweeps: usize,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub c_mart: f64,
    pub w_price: f64,
    pub eliminate_phi_nu: bool,
    pub anderson_depth: usize,
    pub refine_mode: RefineModeName,
    pub ssvi_eta: f64,
    pub ssvi_lambda: f64,
    pub ssvi_rho: f64,
    pub ssvi_theta_slope: f64,
    pub maturities: Vec<f64>,
    /// Strikes per maturity and side: `n + 1` calls and `n + 1` puts.
    pub strike_counts: Vec<usize>,
    pub output_dir: PathBuf,
    pub emit_plots: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ssvi = SsviParams::default();
        Self {
            spot: 100.0,
            ref_vol: 0.2,
            horizon: 1.0,
            schedule: vec![11, 21, 41, 81],
            delta: 5.0,
            k_pts: 50.0,
            epsilon: 1e-6,
            max_sweeps: 500,
            newton_tol: 1e-10,
            newton_max_iter: 50,
            c_mart: 1e4,
            w_price: 1.0,
            eliminate_phi_nu: false,
            anderson_depth: 5,
            refine_mode: RefineModeName::InterpolatePotentials,
            ssvi_eta: ssvi.eta,
            ssvi_lambda: ssvi.lam,
            ssvi_rho: ssvi.rho,
            ssvi_theta_slope: ssvi.theta_slope,
            maturities: DEFAULT_MATURITIES.to_vec(),
            strike_counts: DEFAULT_STRIKE_COUNTS.to_vec(),
            output_dir: PathBuf::from("out"),
            emit_plots: false,
        }
    }
}

/// 1-based line of the first occurrence of `"key"` in `text`.
fn key_line(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map(|i| i + 1)
}

impl RunConfig {
    /// Parses and validates a config document. `origin` names the source in
    /// error messages.
    pub fn from_json(text: &str, origin: &Path) -> Result<Self, CliError> {
        let cfg = Self::parse_json(text, origin)?;
        cfg.validate(Some(text), origin, &[])?;
        Ok(cfg)
    }

    /// Deserialises without validating, so overrides can be applied first.
    pub fn parse_json(text: &str, origin: &Path) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config {
            path: origin.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn read_text(path: &Path) -> Result<String, CliError> {
        std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn ssvi(&self) -> Result<SsviParams, SmotError> {
        SsviParams::new(self.ssvi_eta, self.ssvi_lambda, self.ssvi_rho, self.ssvi_theta_slope)
    }

    /// Checks every field. When `text` is given, errors carry the line of
    /// the offending key; the line is 0 when the key was defaulted or is
    /// listed in `overridden`.
    pub fn validate(&self, text: Option<&str>, origin: &Path, overridden: &[&str]) -> Result<(), CliError> {
        let fail = |key: &str, message: String| {
            let line = if overridden.contains(&key) {
                0
            } else {
                text.and_then(|t| key_line(t, key)).unwrap_or(0)
            };
            let message = if overridden.contains(&key) {
                format!("{key} (command line): {message}")
            } else {
                format!("{key}: {message}")
            };
            CliError::Config {
                path: origin.to_path_buf(),
                line,
                message,
            }
        };
        let positive = [
            ("spot", self.spot),
            ("ref_vol", self.ref_vol),
            ("horizon", self.horizon),
            ("delta", self.delta),
            ("k_pts", self.k_pts),
            ("epsilon", self.epsilon),
            ("newton_tol", self.newton_tol),
            ("w_price", self.w_price),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(fail(key, format!("must be a positive number, got {v}")));
            }
        }
        if !(self.c_mart >= 0.0 && self.c_mart.is_finite()) {
            return Err(fail("c_mart", format!("must be non-negative, got {}", self.c_mart)));
        }
        if self.max_sweeps == 0 {
            return Err(fail("max_sweeps", "must be at least 1".into()));
        }
        if self.newton_max_iter == 0 {
            return Err(fail("newton_max_iter", "must be at least 1".into()));
        }
        if self.anderson_depth == 0 {
            return Err(fail("anderson_depth", "must be at least 1 (1 disables acceleration)".into()));
        }
        if self.schedule.is_empty() || self.schedule[0] < 2 || self.schedule.windows(2).any(|w| w[1] <= w[0]) {
            return Err(fail(
                "schedule",
                format!("must be an increasing list of time-point counts >= 2, got {:?}", self.schedule),
            ));
        }
        if self.maturities.len() != self.strike_counts.len() {
            return Err(fail(
                "strike_counts",
                format!("{} counts for {} maturities", self.strike_counts.len(), self.maturities.len()),
            ));
        }
        if let Some(t) = self.maturities.iter().find(|t| !(**t > 0.0 && **t <= self.horizon)) {
            return Err(fail("maturities", format!("maturity {t} outside (0, {}]", self.horizon)));
        }
        self.ssvi().map_err(|e| fail("ssvi_eta", e.to_string()))?;
        for &points in &self.schedule {
            build_time_grid(self.horizon, points - 1, &self.maturities)
                .map_err(|e| fail("schedule", format!("level with {points} time points: {e}")))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, CliError> {
        RunConfig::from_json(text, Path::new("cfg.json"))
    }

    #[test]
    fn empty_object_gives_defaults() {
        let c = parse("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.schedule, vec![11, 21, 41, 81]);
        assert_eq!(c.c_mart, 1e4);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = parse("{\n  \"spot\": 100,\n  \"spto\": 1\n}").unwrap_err();
        match err {
            CliError::Config { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("spto"));
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn off_grid_schedule_reports_line() {
        let err = parse("{\n  \"k_pts\": 5,\n  \"schedule\": [12]\n}").unwrap_err();
        match err {
            CliError::Config { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("not on the time grid") || message.contains("maturity"), "{message}");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(parse("{\"epsilon\": 0}").is_err());
        assert!(parse("{\"schedule\": [21, 11]}").is_err());
        assert!(parse("{\"strike_counts\": [1]}").is_err());
        assert!(parse("{\"refine_mode\": \"rebuild_reference\"}").is_ok());
        assert!(parse("{\"refine_mode\": \"other\"}").is_err());
    }
}
