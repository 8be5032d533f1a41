use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stabilab::harness::{self, ExperimentConfig, Outcome};

/// Wasserstein stability bounds, coupled SGD simulation and certificates.
///
/// Exit codes: 0 success, 1 usage or config error, 2 inadmissible
/// parameters, 3 certificate failure. `STABILAB_THREADS` caps parallelism.
#[derive(Parser)]
#[command(name = "stabilab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate the regime's closed-form bound and write bounds.json.
    Bounds {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the coupled ensemble and write estimates.csv and summary.json.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the certificate suite and write certificates.jsonl.
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate an output directory into report.md.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("STABILAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| format!("STABILAB_THREADS must be a positive integer, got {raw:?}"))?;
    if n == 0 {
        return Err("STABILAB_THREADS must be at least 1".into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    let result = match &cli.command {
        Command::Bounds { config, out } => {
            ExperimentConfig::from_path(config).and_then(|c| harness::cmd_bounds(&c, out.as_deref()))
        }
        Command::Simulate { config, out } => {
            ExperimentConfig::from_path(config).and_then(|c| harness::cmd_simulate(&c, out.as_deref()))
        }
        Command::Verify { config, out } => {
            ExperimentConfig::from_path(config).and_then(|c| harness::cmd_verify(&c, out.as_deref()))
        }
        Command::Report { input } => harness::cmd_report(input).map(|md| {
            print!("{md}");
            Outcome::Success
        }),
    };
    match &result {
        Err(e) => eprintln!("error: {e}"),
        Ok(Outcome::CertificateFailure) => eprintln!("certificate failure: see certificates.jsonl"),
        Ok(Outcome::Success) => {}
    }
    ExitCode::from(harness::exit_code(&result) as u8)
}
