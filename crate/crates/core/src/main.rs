use std::path::PathBuf;
use std::process::ExitCode;

use agecurve::cli::{run, RunRequest, Subcommand};
use agecurve::Error;
use clap::{Parser, ValueEnum};

#[derive(Clone, Copy, ValueEnum)]
enum Command {
    Smooth,
    Fpca,
    Pace,
    Permtest,
    Cluster,
    Summary,
    Simulate,
}

/// Functional data analysis of career aging curves.
#[derive(Parser)]
#[command(name = "agecurve", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; files land in <out>/<subcommand>/.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override a config field, e.g. --set permtest.replications=1000
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let sub = match args.command {
        Command::Smooth => Subcommand::Smooth,
        Command::Fpca => Subcommand::Fpca,
        Command::Pace => Subcommand::Pace,
        Command::Permtest => Subcommand::Permtest,
        Command::Cluster => Subcommand::Cluster,
        Command::Summary => Subcommand::Summary,
        Command::Simulate => Subcommand::Simulate,
    };
    let request = RunRequest {
        config_path: args.config,
        seed: args.seed,
        out_dir: args.out,
        overrides: args.overrides,
    };
    match run(sub, &request) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn error_json(e: &Error) -> String {
    let messages = match e {
        Error::Config(list) => list.clone(),
        other => vec![other.to_string()],
    };
    serde_json::json!({ "exit_code": e.exit_code(), "errors": messages }).to_string()
}
