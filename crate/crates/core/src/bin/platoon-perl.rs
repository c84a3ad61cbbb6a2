use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use platoon_perl::config::{HarnessConfig, Matrix, Overrides};
use platoon_perl::disturbance::DisturbanceKind;
use platoon_perl::error::Error;
use platoon_perl::harness::{export_plot_data, run_harness};
use platoon_perl::metrics::mean_summary;
use platoon_perl::scenario::{ControllerKind, ScenarioKind};

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

/// Platoon MPC with online residual learning.
#[derive(Debug, Parser)]
#[command(name = "platoon-perl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run experiments and write trajectories, metrics and a manifest.
    Run {
        /// JSON configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// uniform | variable
        #[arg(long)]
        scenario: Option<ScenarioKind>,
        /// none | affine | quadratic
        #[arg(long)]
        error: Option<DisturbanceKind>,
        /// mpc_only | mpc_nn | mpc_q (repeatable)
        #[arg(long)]
        controller: Vec<ControllerKind>,
        /// Random seed (repeatable).
        #[arg(long)]
        seed: Vec<u64>,
        /// Predefined grid: `full` runs both scenarios, affine and quadratic
        /// error, and all three controllers.
        #[arg(long)]
        matrix: Option<Matrix>,
        /// Output directory (default: $PLATOON_PERL_OUT or ./platoon-perl-out).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write time-space and velocity-error series from a finished run.
    ExportPlot {
        /// Run directory containing manifest.json.
        #[arg(long)]
        run: PathBuf,
    },
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if e.is_config() { EXIT_CONFIG } else { EXIT_RUNTIME })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Run {
            config,
            scenario,
            error,
            controller,
            seed,
            matrix,
            out,
        } => {
            let mut cfg = match config {
                Some(path) => match HarnessConfig::load(&path) {
                    Ok(cfg) => cfg,
                    Err(e) => return fail(&e),
                },
                None => HarnessConfig::default(),
            };
            cfg.apply(&Overrides {
                scenario,
                error,
                controllers: controller,
                seeds: seed,
                matrix,
                out,
            });
            if let Err(e) = cfg.validate() {
                return fail(&e);
            }
            let out_dir = cfg.resolve_output_dir();
            let summary = match run_harness(&cfg, &out_dir) {
                Ok(s) => s,
                Err(e) => return fail(&e),
            };
            println!("{:<10} {:<10} {:<4} {:>10} {:>9} {:>8} {:>8}", "scenario", "error", "ctl", "CAE_p", "CAE_v", "MAE_p", "MAE_v");
            let mut seen = Vec::new();
            for r in &summary.reports {
                let key = (r.scenario, r.error, r.controller);
                if seen.contains(&key) {
                    continue;
                }
                seen.push(key);
                let group: Vec<_> = summary
                    .reports
                    .iter()
                    .filter(|o| (o.scenario, o.error, o.controller) == key)
                    .collect();
                if let Some(m) = mean_summary(&group) {
                    println!(
                        "{:<10} {:<10} {:<4} {:>10.2} {:>9.3} {:>8.3} {:>8.3}",
                        r.scenario.as_str(),
                        r.error.as_str(),
                        r.controller.label(),
                        m.cae_p,
                        m.cae_v,
                        m.mae_p,
                        m.mae_v
                    );
                }
            }
            println!("wrote {}", summary.out_dir.display());
            let failed: Vec<_> = summary.failures().collect();
            if failed.is_empty() {
                ExitCode::SUCCESS
            } else {
                for c in failed {
                    eprintln!("run {} failed: {}", c.name, c.failure.as_deref().unwrap_or(""));
                }
                ExitCode::from(EXIT_RUNTIME)
            }
        }
        Command::ExportPlot { run } => match export_plot_data(&run) {
            Ok(paths) => {
                for p in paths {
                    println!("wrote {}", p.display());
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
    }
}
