use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cldc::harness;
use cldc::Error;

#[derive(Parser)]
#[command(name = "cldc", about = "Continual RL over changing action sets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one method on one task sequence for every seed.
    Run {
        /// JSON run configuration; defaults are used for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dotted override, e.g. `--set a2c.gamma=0.95` (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Seeds trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Aggregate the runs under a directory into a Return/Forgetting/Transfer table.
    Report {
        #[arg(long)]
        runs: PathBuf,
    },
    /// Score the saved encoder-decoder of a run on a fresh probe buffer.
    Probe {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        task: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 2000)]
        transitions: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    if e.is_config() {
        2
    } else if e.is_numeric() {
        3
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, overrides, jobs } => harness::load_config(config.as_deref(), &overrides)
            .and_then(|cfg| harness::run(&cfg, jobs))
            .map(|out| {
                println!("{}", out.dir.display());
                let r = &out.report;
                println!(
                    "{} return {:.3} ± {:.3}",
                    r.method, r.continual_return.mean, r.continual_return.ci95
                );
            }),
        Command::Report { runs } => harness::report(&runs).map(|t| print!("{}", t.text())),
        Command::Probe { run, task, seed, transitions } => harness::probe(&run, task, seed, transitions).map(|s| {
            println!("{}", serde_json::to_string_pretty(&s).expect("summary serializes"));
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
