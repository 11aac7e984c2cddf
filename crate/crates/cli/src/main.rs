use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use geocon_cli::{load_scenario, report, run_command, CliError, Command, Options, EXIT_ERROR};

/// Geometric control workbench: brackets, variations, cones, constraint
/// ladders and extremal audits for control-affine systems.
#[derive(Debug, Parser)]
#[command(name = "geocon", version)]
struct Args {
    /// bracket | flow | variation | cone | pca | extremal | audit | mech-check
    command: Command,
    /// Scenario JSON file.
    scenario: PathBuf,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Initial or test covector, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    covector: Option<Vec<f64>>,
    /// Analysis time (cone time, variation time, ...).
    #[arg(long, allow_negative_numbers = true)]
    time: Option<f64>,
    /// Integrator step, overriding the scenario.
    #[arg(long)]
    step: Option<f64>,
    /// Seed for randomized diagnostics.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn run(args: &Args) -> Result<i32, CliError> {
    let scenario = load_scenario(&args.scenario)?;
    let opts = Options {
        covector: args.covector.clone(),
        time: args.time,
        step: args.step,
        seed: args.seed,
    };
    let outcome = run_command(args.command, &scenario, &args.scenario.display().to_string(), &opts)?;
    if let Some(path) = &args.out {
        std::fs::write(path, report::render(&outcome.report)).map_err(|source| CliError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    print!("{}", outcome.stdout());
    Ok(outcome.exit_code())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("GEOCON_LOG")).init();
    let args = Args::parse();
    match run(&args) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("geocon: {e}");
            ExitCode::from(EXIT_ERROR as u8)
        }
    }
}
