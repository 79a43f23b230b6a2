use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use cloud_uzawa::BallConvention;
use cloud_uzawa_cli::{cmd_run, cmd_solve, cmd_stepsize, load_config, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "cloud-uzawa", version, about = "Cloud-coordinated multi-agent Uzawa simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML run configuration.
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory (overrides `output.dir`, default `out`).
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Seed for sampling and privacy relabeling.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Convention {
    Norm,
    Level,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the protocol and write `trace.csv` and `report.json`.
    Run {
        #[command(flatten)]
        common: Common,
        /// Ball membership: `norm` is ||z - z_hat|| <= eps, `level` is V <= eps.
        #[arg(long, value_enum)]
        convention: Option<Convention>,
        /// Relabel other agents' variables before shipping partials.
        #[arg(long, overrides_with = "no_privacy")]
        privacy: bool,
        /// Ship partials with the true variable labels.
        #[arg(long)]
        no_privacy: bool,
    },
    /// Estimate the stepsize bounds and write `stepsize.json`.
    Stepsize {
        #[command(flatten)]
        common: Common,
        /// Sample count (overrides `stepsize.n_samples`).
        #[arg(long)]
        samples: Option<usize>,
        /// Sample the full level sets instead of only mu >= 0.
        #[arg(long)]
        no_clip: bool,
    },
    /// Run the centralized solver and write `saddle.json`.
    Solve {
        #[command(flatten)]
        common: Common,
    },
}

fn prepare(common: &Common) -> Result<(RunConfig, PathBuf), CliError> {
    let mut cfg = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    Ok((cfg, out))
}

fn execute(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Run { common, convention, privacy, no_privacy } => {
            let (mut cfg, out) = prepare(&common)?;
            if let Some(c) = convention {
                cfg.ball_convention = match c {
                    Convention::Norm => BallConvention::Norm,
                    Convention::Level => BallConvention::Level,
                };
            }
            if privacy || no_privacy {
                cfg.privacy = privacy;
            }
            let report = cmd_run(&cfg, &out)?;
            let entry = report.entry.map_or("none".to_string(), |e| e.timestep.to_string());
            let line = format!(
                "status=ok rho={} entry_timestep={entry} final_v={:e} out={}",
                report.rho,
                report.final_v,
                out.display()
            );
            if report.violations.is_empty() {
                Ok(line)
            } else {
                Err(CliError::Violations(report.violations))
            }
        }
        Command::Stepsize { common, samples, no_clip } => {
            let (mut cfg, out) = prepare(&common)?;
            if let Some(n) = samples {
                cfg.stepsize.n_samples = n;
            }
            if no_clip {
                cfg.stepsize.clip_to_orthant = false;
            }
            let rep = cmd_stepsize(&cfg, Some(&out))?;
            Ok(format!(
                "status=ok gamma1={:e} gamma2={:e} rho_max={:e} rho_recommended={:e}",
                rep.gamma1, rep.gamma2, rep.rho_max, rep.rho_recommended
            ))
        }
        Command::Solve { common } => {
            let (cfg, out) = prepare(&common)?;
            let s = cmd_solve(&cfg, Some(&out))?;
            Ok(format!("status=ok steps={} converged={} saddle={:?}", s.steps, s.converged, s.point))
        }
    }
}

fn main() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(line) => {
            println!("{line}");
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            let message = serde_json::to_string(&e.to_string()).context("encoding diagnostic")?;
            eprintln!("status=error code={} kind={} message={message}", e.exit_code(), e.kind());
            Ok(ExitCode::from(e.exit_code()))
        }
    }
}
