use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use formation_core::cli::{self, SweepSpec, OUT_DIR_ENV};
use formation_core::config::load_config;
use formation_core::sim::Policy;

#[derive(Parser)]
#[command(name = "formsim", version, about = "Formation and virtual-platoon traffic simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, env = OUT_DIR_ENV, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write metrics, heatmap and summary files.
    Run {
        #[command(flatten)]
        common: Common,
        /// Defaults to `rng_seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "multi-vp")]
        policy: Policy,
    },
    /// Run a grid over one variable, seeds and policies in parallel.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `vgr`, `throughput`, or any dotted numeric config key.
        #[arg(long)]
        var: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long = "seed", value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long = "policy", value_delimiter = ',', required = true)]
        policies: Vec<Policy>,
    },
}

fn fail(path: &Path, e: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {}: {e}", path.display());
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    match Cli::parse().cmd {
        Command::Run { common, seed, policy } => {
            let cfg = match load_config(&common.config) {
                Ok(c) => c,
                Err(e) => return fail(&common.config, e),
            };
            let seed = seed.unwrap_or(cfg.rng_seed);
            match cli::run(&common.config, &cfg, seed, policy, &common.out) {
                Ok((m, s)) => {
                    println!("run {} written to {}", m.run_id, m.out_dir.display());
                    println!(
                        "spawned {} exited {} remaining {} mean_speed {:.3} mean_abs_accel {:.3} safety_violations {}",
                        s.spawned, s.exited, s.remaining_final, s.mean_speed, s.mean_abs_accel, s.safety_violations
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&common.config, e),
            }
        }
        Command::Sweep { common, var, values, seeds, policies } => {
            let cfg = match load_config(&common.config) {
                Ok(c) => c,
                Err(e) => return fail(&common.config, e),
            };
            let spec = SweepSpec { variable: var, values, seeds, policies };
            match cli::sweep(&common.config, &cfg, &spec, &common.out) {
                Ok(o) => {
                    println!("{} runs", o.rows.len());
                    println!("rows: {}", o.rows_path.display());
                    println!("aggregate: {}", o.aggregate_path.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&common.config, e),
            }
        }
    }
}
