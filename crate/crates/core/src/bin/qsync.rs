use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qsync_core::scenario::{
    preset, run_dynamic, run_fuzz, run_picture, run_sweep, write_dynamic, write_json, write_sweep, ScenarioConfig,
    ScenarioError, ScenarioKind,
};

/// Phase synchronization of two membranes in an optomechanical cavity.
#[derive(Parser)]
#[command(name = "qsync", version)]
struct Cli {
    /// Output directory (overrides QSYNC_OUT_DIR and the config's out_dir).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a preset (fig3, fig4, picture, fuzz, custom) or a config file.
    Run {
        preset_or_config: String,
        /// Overrides as `--key value` pairs.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Run every cell of the `sweep.<key>` axes in a config file.
    Sweep {
        config: String,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Rotated-frame pipeline for the two-branch coherent mixture.
    Picture {
        /// Overrides such as `--theta 0.5 --t 10 --alpha-re 3`.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Randomized check of the uncertainty inequalities.
    Fuzz {
        #[arg(long, default_value_t = 100_000)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        mode_count: usize,
        #[arg(long, default_value_t = 2.0)]
        squeeze_max: f64,
        #[arg(long, default_value_t = 3)]
        layers: usize,
        #[arg(long, default_value_t = 3.0)]
        nu_max: f64,
    },
}

fn execute(c: &ScenarioConfig, out: Option<&std::path::Path>) -> Result<bool, ScenarioError> {
    let dir = c.resolve_out_dir(out);
    match c.kind {
        ScenarioKind::Picture => {
            let report = run_picture(c)?;
            std::fs::create_dir_all(&dir).map_err(|source| ScenarioError::Io {
                path: dir.display().to_string(),
                source,
            })?;
            write_json(&dir.join("picture.json"), &report)?;
            println!(
                "|<b1>| = {:.12e}  |<b2>| = {:.12e}  relative phase = {:.12}  u_suf = {:.6e}  separable = {}  synchronized = {}",
                report.mean_b1_abs, report.mean_b2_abs, report.relative_phase, report.u_suf, report.separable, report.synchronized
            );
            println!("wrote {}", dir.join("picture.json").display());
            Ok(report.separable)
        }
        ScenarioKind::Fuzz => {
            let summary = run_fuzz(c)?;
            std::fs::create_dir_all(&dir).map_err(|source| ScenarioError::Io {
                path: dir.display().to_string(),
                source,
            })?;
            write_json(&dir.join("fuzz.json"), &summary)?;
            println!(
                "trials = {}  violations: a2 = {}  a4 = {}  a5 = {}  ordering = {}",
                summary.trials,
                summary.a2_violations,
                summary.a4_violations,
                summary.a5_violations,
                summary.ordering_violations
            );
            println!(
                "worst margins: a2 = {:.3e}  a4 = {:.3e}  a5 = {:.3e} (seed {})",
                summary.worst_a2.margin, summary.worst_a4.margin, summary.worst_a5.margin, summary.worst_a5.seed
            );
            println!("wrote {}", dir.join("fuzz.json").display());
            Ok(summary.total_violations() == 0)
        }
        _ => {
            let run = run_dynamic(c)?;
            write_dynamic(&dir, &run)?;
            let s = &run.summary;
            println!(
                "samples = {}  gated = {}  sandwich violations = {}",
                s.samples, s.gated_samples, s.sandwich_violations
            );
            if let Some(l) = &s.lock {
                println!(
                    "final window: locked = {}  phase difference = {:.6}  slope = {:.3e}",
                    l.verdict.locked, l.verdict.locked_value, l.verdict.slope
                );
            }
            println!("wrote {}", dir.display());
            Ok(s.invariants_ok)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let out = cli.out_dir.as_deref();
    let result = match cli.command {
        Command::Run {
            preset_or_config,
            overrides,
        } => ScenarioConfig::load(&preset_or_config)
            .and_then(|mut c| c.apply_overrides(&overrides).map(|_| c))
            .and_then(|c| execute(&c, out)),
        Command::Picture { overrides } => preset("picture")
            .and_then(|mut c| c.apply_overrides(&overrides).map(|_| c))
            .and_then(|c| execute(&c, out)),
        Command::Fuzz {
            trials,
            seed,
            mode_count,
            squeeze_max,
            layers,
            nu_max,
        } => preset("fuzz")
            .and_then(|mut c| {
                c.trials = trials;
                c.seed = seed;
                c.mode_count = mode_count;
                c.squeeze_max = squeeze_max;
                c.correlation_mixing = layers;
                c.nu_max = nu_max;
                c.validate().map(|_| c)
            })
            .and_then(|c| execute(&c, out)),
        Command::Sweep { config, overrides } => ScenarioConfig::load(&config)
            .and_then(|mut c| c.apply_overrides(&overrides).map(|_| c))
            .and_then(|c| {
                let rows = run_sweep(&c)?;
                let dir = c.resolve_out_dir(out);
                std::fs::create_dir_all(&dir).map_err(|source| ScenarioError::Io {
                    path: dir.display().to_string(),
                    source,
                })?;
                let path = dir.join("sweep.csv");
                write_sweep(&path, &c.sweep, &rows)?;
                let failed = rows.iter().filter(|r| r.result.is_err()).count();
                let violations: usize = rows
                    .iter()
                    .filter_map(|r| r.result.as_ref().ok())
                    .map(|r| r.sandwich_violations)
                    .sum();
                println!("cells = {}  failed = {failed}  sandwich violations = {violations}", rows.len());
                println!("wrote {}", path.display());
                Ok(failed == 0 && violations == 0)
            }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: an internal invariant failed; see the summary");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
