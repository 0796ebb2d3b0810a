use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use smot_cli::artifacts::write_artifacts;
use smot_cli::{run_calibration, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "smot", version, about = "Entropic transport calibration of a local-vol chain to vanilla prices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate to a synthetic SSVI market and write artifacts.
    Calibrate {
        /// Flat JSON config; omitted keys take their defaults.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        emit_plots: bool,
        /// Worker threads; without it RAYON_NUM_THREADS is honoured.
        #[arg(long)]
        threads: Option<usize>,
        /// Time-point counts per level, e.g. 11,21,41.
        #[arg(long, value_delimiter = ',')]
        schedule: Option<Vec<usize>>,
        #[arg(long)]
        epsilon: Option<f64>,
    },
}

fn calibrate(
    config: PathBuf,
    output_dir: Option<PathBuf>,
    emit_plots: bool,
    threads: Option<usize>,
    schedule: Option<Vec<usize>>,
    epsilon: Option<f64>,
) -> Result<i32, CliError> {
    let text = RunConfig::read_text(&config)?;
    let mut cfg = RunConfig::parse_json(&text, &config)?;
    let mut overridden = Vec::new();
    if let Some(s) = schedule {
        cfg.schedule = s;
        overridden.push("schedule");
    }
    if let Some(e) = epsilon {
        cfg.epsilon = e;
        overridden.push("epsilon");
    }
    if let Some(d) = output_dir {
        cfg.output_dir = d;
    }
    cfg.emit_plots |= emit_plots;
    cfg.validate(Some(&text), &config, &overridden)?;
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::ThreadPool(e.to_string()))?;
    }

    let run = run_calibration(&cfg)?;
    write_artifacts(&run, &cfg.output_dir, cfg.emit_plots)?;
    for lv in &run.levels {
        let last = lv.outcome.reports.last();
        eprintln!(
            "level {:>3} points: {:?} after {} sweeps, e_max {:.3e}, price err {:.3e}, mart err {:.3e}",
            lv.n_points,
            lv.outcome.status,
            lv.outcome.reports.len(),
            last.map_or(f64::NAN, |r| r.e_max),
            last.map_or(f64::NAN, |r| r.price_error_l2),
            last.map_or(f64::NAN, |r| r.martingale_error_l2),
        );
    }
    eprintln!("wrote {} ({:.1}s)", cfg.output_dir.display(), run.elapsed_secs);
    Ok(run.exit_code())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Calibrate {
            config,
            output_dir,
            emit_plots,
            threads,
            schedule,
            epsilon,
        } => calibrate(config, output_dir, emit_plots, threads, schedule, epsilon),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
