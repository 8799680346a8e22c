//! `srsmc` — command-line front end for the SMC decoding engine.
//!
//! Subcommands: `generate` (sequences + traces + metrics), `sweep`
//! (hyperparameter grid with paired seeds), `oracle-check` (engine vs.
//! exhaustive oracle), and `trace` (pretty-print a saved trace).
//!
//! Option precedence, lowest to highest: built-in defaults, config file,
//! command-line flags, then the `SRSMC_SEED` environment variable (seed
//! only). Exit codes: 0 success, 1 usage/config error, 2 backend error,
//! 3 oracle-check failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use srsmc_core::config::{apply_env_overrides, load_config, BackendKind, PolicyKind, RunConfig};
use srsmc_core::error::Error;
use srsmc_core::pipeline::read_trace;
use srsmc_core::runner::{cmd_generate, cmd_oracle_check, cmd_sweep, format_trace, SweepAxis};

#[derive(Parser)]
#[command(name = "srsmc", version, about = "Self-rewarding SMC decoding engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate sequences; writes sequences.jsonl, per-sample traces,
    /// metrics.csv, and manifest.json to the output directory.
    Generate(GenerateArgs),
    /// Run a grid of configurations with paired seeds; writes sweep.csv
    /// and manifest.json.
    Sweep(SweepArgs),
    /// Check the engine against the exhaustive path oracle; exits 3 if
    /// any check fails.
    OracleCheck(OracleCheckArgs),
    /// Pretty-print a saved trace file.
    Trace(TraceArgs),
}

/// Flags shared by every run-producing subcommand. Each one overrides the
/// matching config-file field.
#[derive(Args)]
struct CommonArgs {
    /// Config file (JSON).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of particles.
    #[arg(long, value_name = "N")]
    particles: Option<usize>,
    /// Draft temperature (0 disables stochastic drafting).
    #[arg(long)]
    tau: Option<f64>,
    /// Remasking policy.
    #[arg(long, value_enum)]
    policy: Option<PolicyArg>,
    /// Confidence threshold for --policy threshold.
    #[arg(long, value_name = "RHO")]
    threshold: Option<f64>,
    /// Block size for semi-autoregressive generation (must divide the
    /// sequence length).
    #[arg(long, value_name = "LEN")]
    block_size: Option<usize>,
    /// Probability backend.
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Base URL of the remote backend.
    #[arg(long, value_name = "URL")]
    endpoint: Option<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Topk,
    Threshold,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Exact,
    Remote,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of sequences to generate (seeds seed, seed+1, ...).
    #[arg(long)]
    samples: Option<usize>,
    /// Worker threads for parallel samples.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Particles,
    Tau,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Which hyperparameter to sweep.
    #[arg(long, value_enum)]
    axis: AxisArg,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    /// Seeds per axis value (seed, seed+1, ...; shared across values).
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    /// Worker threads for parallel cells.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct OracleCheckArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// SMC runs behind the statistical checks.
    #[arg(long, default_value_t = 10_000)]
    runs: usize,
    /// Sabotage the engine-side weights so the equivalence check must
    /// fail (negative control).
    #[arg(long, hide = true)]
    corrupt_weights: bool,
}

#[derive(Args)]
struct TraceArgs {
    /// Trace file written by a generate run.
    path: PathBuf,
}

/// Builds the effective config: defaults, then file, then flags, then the
/// seed environment variable. Returns the config plus the seed as it
/// stood before the env override, for manifest provenance.
fn resolve(common: &CommonArgs) -> Result<(RunConfig, u64), Error> {
    let mut cfg = load_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(particles) = common.particles {
        cfg.particles = particles;
    }
    if let Some(tau) = common.tau {
        cfg.tau = tau;
    }
    if let Some(policy) = common.policy {
        cfg.policy = match policy {
            PolicyArg::Topk => PolicyKind::Topk,
            PolicyArg::Threshold => PolicyKind::Threshold,
        };
    }
    if let Some(threshold) = common.threshold {
        cfg.threshold = threshold;
    }
    if let Some(block_size) = common.block_size {
        cfg.block_size = Some(block_size);
    }
    if let Some(backend) = common.backend {
        cfg.backend = match backend {
            BackendArg::Exact => BackendKind::Exact,
            BackendArg::Remote => BackendKind::Remote,
        };
    }
    if let Some(endpoint) = &common.endpoint {
        cfg.endpoint = Some(endpoint.clone());
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    let config_seed = cfg.seed;
    apply_env_overrides(&mut cfg)?;
    Ok((cfg, config_seed))
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Generate(args) => {
            let (mut cfg, config_seed) = resolve(&args.common)?;
            if let Some(samples) = args.samples {
                cfg.samples = samples;
            }
            if let Some(workers) = args.workers {
                cfg.workers = workers;
            }
            let bundle = cmd_generate(&cfg, config_seed)?;
            println!("sequences: {}", bundle.sequences_path.unwrap().display());
            println!("metrics:   {}", bundle.metrics_path.unwrap().display());
            println!("manifest:  {}", bundle.manifest_path.display());
            Ok(0)
        }
        Command::Sweep(args) => {
            let (mut cfg, config_seed) = resolve(&args.common)?;
            if let Some(workers) = args.workers {
                cfg.workers = workers;
            }
            let axis = parse_axis(args.axis, &args.values)?;
            let bundle = cmd_sweep(&cfg, &axis, args.seeds, config_seed)?;
            println!("sweep:    {}", bundle.metrics_path.unwrap().display());
            println!("manifest: {}", bundle.manifest_path.display());
            Ok(0)
        }
        Command::OracleCheck(args) => {
            let (cfg, _) = resolve(&args.common)?;
            let report = cmd_oracle_check(&cfg, args.runs, args.corrupt_weights)?;
            for check in &report.checks {
                let verdict = if check.passed { "PASS" } else { "FAIL" };
                println!("{verdict} {:<16} {}", check.name, check.detail);
            }
            if report.passed() {
                println!("oracle check passed ({} checks)", report.checks.len());
                Ok(0)
            } else {
                println!("oracle check FAILED");
                Ok(3)
            }
        }
        Command::Trace(args) => {
            let trace = read_trace(&args.path)?;
            print!("{}", format_trace(&trace));
            Ok(0)
        }
    }
}

fn parse_axis(axis: AxisArg, values: &[String]) -> Result<SweepAxis, Error> {
    match axis {
        AxisArg::Particles => values
            .iter()
            .map(|v| {
                v.parse::<usize>()
                    .map_err(|e| Error::config(format!("values: {v:?}: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(SweepAxis::Particles),
        AxisArg::Tau => values
            .iter()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| Error::config(format!("values: {v:?}: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(SweepAxis::Tau),
    }
}

/// 2 for backend/protocol failures, 1 for everything else.
fn exit_code_of(err: &Error) -> u8 {
    match err {
        Error::Backend { .. } | Error::Protocol { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    // Usage errors exit 1 (clap's default of 2 is reserved for backend
    // failures here); --help and --version still exit 0.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.exit_code() == 0 { 0 } else { 1 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_of(&e))
        }
    }
}
