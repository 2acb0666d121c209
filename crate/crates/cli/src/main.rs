use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mbcel_cli::commands::{execute, Invocation};
use mbcel_cli::config::Mode;
use mbcel_cli::{error_line, exit_code};

#[derive(Parser)]
#[command(name = "mbcel", version, about = "Multiply bias-calibrated empirical likelihood toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo study over generated scenario populations.
    Simulate(Common),
    /// Monte Carlo study over a fixed population read from CSV.
    Plasmode(Common),
    /// One-shot estimation on user-supplied population and sample files.
    Estimate(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory; overrides the config and MBCEL_OUT_DIR.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed overriding the config.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads (default: available cores).
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
    /// Suppress the summary printed on success.
    #[arg(long)]
    quiet: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (mode, args) = match cli.command {
        Command::Simulate(a) => (Mode::Simulate, a),
        Command::Plasmode(a) => (Mode::Plasmode, a),
        Command::Estimate(a) => (Mode::Estimate, a),
    };
    let config_out = mbcel_cli::config::RunConfig::from_file(&args.config)
        .ok()
        .map(|c| (c.output_dir.clone(), c.quiet.unwrap_or(false)));
    let base = args.config.parent().map(PathBuf::from).unwrap_or_default();
    let (cfg_dir, cfg_quiet) = config_out.unwrap_or((None, false));
    let out_dir = args
        .out
        .or_else(|| cfg_dir.map(|d| if d.is_absolute() { d } else { base.join(d) }))
        .or_else(|| std::env::var_os("MBCEL_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("mbcel-out"));
    let threads = args
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if threads == 0 {
        eprintln!("error[config]: invalid configuration: field `--threads`: must be at least 1");
        return ExitCode::from(2);
    }
    let inv = Invocation {
        mode,
        config_path: args.config,
        out_dir,
        seed: args.seed,
        threads,
    };
    match execute(&inv) {
        Ok(outcome) => {
            if !(args.quiet || cfg_quiet) {
                print!("{}", outcome.summary);
                println!("artifacts written to {}", outcome.output_dir.display());
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", error_line(&err));
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
