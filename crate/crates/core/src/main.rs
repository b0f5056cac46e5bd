use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dynphase::experiments::{run, Command, ExperimentConfig};

#[derive(Parser)]
#[command(name = "dynphase", version, about = "Phase retrieval from phaseless dynamical samples: experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Approximate Prony errors over a (K, L) grid, noise-free and noisy.
    PronyBench(Flags),
    /// Real signal and low-pass kernel from two sampling vectors.
    LowpassRealDemo(Flags),
    /// Complex signal and low-pass kernel from four sampling vectors.
    LowpassComplexDemo(Flags),
    /// Signal and spectrum from many narrow-band sampling vectors.
    MultivectorDemo(Flags),
    /// Monte Carlo comparison of every error bound with observed errors.
    SensitivityCheck(Flags),
    /// Serialization round trip of instances and recovery results.
    Roundtrip(Flags),
}

#[derive(Args)]
struct Flags {
    /// Signal dimension.
    #[arg(long)]
    d: Option<usize>,
    /// Number of exponential terms (prony-bench).
    #[arg(long)]
    k: Option<usize>,
    /// Samples per sampling vector.
    #[arg(long)]
    l: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    /// Noise modulus bound; for sensitivity-check, a fixed perturbation size.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// TOML file with any of the above (flags take precedence).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Support width of the sampling vectors (multivector-demo).
    #[arg(long)]
    window: Option<usize>,
    /// Skip the Gauss-Newton refinement of the recovery pipelines.
    #[arg(long)]
    no_polish: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, flags) = match cli.command {
        Cmd::PronyBench(f) => (Command::PronyBench, f),
        Cmd::LowpassRealDemo(f) => (Command::LowpassRealDemo, f),
        Cmd::LowpassComplexDemo(f) => (Command::LowpassComplexDemo, f),
        Cmd::MultivectorDemo(f) => (Command::MultivectorDemo, f),
        Cmd::SensitivityCheck(f) => (Command::SensitivityCheck, f),
        Cmd::Roundtrip(f) => (Command::Roundtrip, f),
    };
    match execute(command, flags) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn execute(command: Command, flags: Flags) -> dynphase::Result<bool> {
    let base = match &flags.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let overrides = ExperimentConfig {
        d: flags.d,
        k: flags.k,
        l: flags.l,
        trials: flags.trials,
        noise: flags.noise,
        seed: flags.seed,
        out: flags.out,
        window: flags.window,
        polish_iterations: flags.no_polish.then_some(0),
        ..Default::default()
    };
    let cfg = base.merged(overrides).resolve(command)?;
    let out = run(&cfg)?;
    out.write(&cfg.out)?;
    println!("{command}: {} rows written to {}", out.rows.len(), cfg.out.display());
    if let Some(groups) = out.summary.get("groups").and_then(|g| g.as_array()) {
        for g in groups {
            println!("  {g}");
        }
    }
    if let Some(checks) = out.summary.get("checks").and_then(|c| c.as_array()) {
        for c in checks {
            println!("  {} trials={} skipped={} violations={} max_ratio={:.3e}", c["id"], c["trials"], c["skipped"], c["violations"], c["max_ratio"].as_f64().unwrap_or(f64::NAN));
        }
    }
    for f in out.failures.iter().take(20) {
        eprintln!("failure: {f}");
    }
    if out.failures.len() > 20 {
        eprintln!("... {} failures in total", out.failures.len());
    }
    Ok(out.succeeded())
}
