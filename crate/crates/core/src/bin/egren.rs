//! `egren`: batch runs of graph expansion, products, renormalization,
//! classification and the invariant suite.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use egren_core::cli::{exit_code, parse_config_with_overrides, run, EXIT_CHECK_FAILED};
use egren_core::EgError;

#[derive(Parser, Debug)]
#[command(name = "egren", version, about = "Renormalized time-ordered products of local functionals on Euclidean space")]
struct Args {
    /// Run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the quadrature tolerance.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Seed for randomized checks.
    #[arg(long)]
    seed: Option<u64>,
    /// Print the aligned tables instead of JSON on stdout.
    #[arg(long)]
    text: bool,
    /// Command name and/or `key=value` settings overriding the config file.
    settings: Vec<String>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(&args) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("egren: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

fn execute(args: &Args) -> Result<i32, EgError> {
    let text = match &args.config {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| EgError::PreconditionViolated(format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut overrides: Vec<String> = args
        .settings
        .iter()
        .map(|s| if s.contains('=') { s.clone() } else { format!("command={s}") })
        .collect();
    if let Some(t) = args.tolerance {
        overrides.push(format!("tolerance={t:e}"));
    }
    if let Some(s) = args.seed {
        overrides.push(format!("seed={s}"));
    }
    let config = parse_config_with_overrides(&text, &overrides)?;
    let report = run(&config)?;
    let json = report.to_json_string();
    match &args.out {
        Some(p) => {
            std::fs::write(p, &json)
                .map_err(|e| EgError::PreconditionViolated(format!("cannot write {}: {e}", p.display())))?;
            print!("{}", report.text);
        }
        None if args.text => print!("{}", report.text),
        None => print!("{json}"),
    }
    Ok(if report.passed { 0 } else { EXIT_CHECK_FAILED })
}
