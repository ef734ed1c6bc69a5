use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nldbench::commands::{cmd_generate, cmd_report, cmd_run, cmd_score, cmd_validate, CommandOptions};
use nldbench::config::Overrides;

#[derive(Parser)]
#[command(name = "nldbench", version, about = "Generate and score natural-language descriptions of C/C++ code")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// Harness configuration file (TOML).
    #[arg(long, default_value = "nldbench.toml")]
    config: PathBuf,
    /// Run identifier; defaults to a timestamp for new runs and the newest run otherwise.
    #[arg(long)]
    run_id: Option<String>,
    /// Use a deterministic sample of N corpus examples.
    #[arg(long)]
    sample: Option<usize>,
    /// Seed for sampling and the offline mock backends.
    #[arg(long)]
    seed: Option<u64>,
    /// Recompute artifacts that already exist.
    #[arg(long)]
    force: bool,
    /// Concurrent cells (generation) or scoring threads.
    #[arg(long)]
    parallelism: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Check the configuration and corpus and print resolved settings.
    Validate(Common),
    /// Generate and refine descriptions for every corpus × model cell.
    Generate(Common),
    /// Score a run's generations.
    Score(Common),
    /// Build the comparison report for a scored run.
    Report(Common),
    /// validate, generate, score and report in one go.
    Run(Common),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (Command::Validate(c) | Command::Generate(c) | Command::Score(c) | Command::Report(c) | Command::Run(c)) =
        &cli.command;
    let opts = CommandOptions {
        overrides: Overrides {
            run_id: c.run_id.clone(),
            sample: c.sample,
            seed: c.seed,
            parallelism: c.parallelism,
        },
        force: c.force,
    };
    let status = match &cli.command {
        Command::Validate(_) => cmd_validate(&c.config, &opts),
        Command::Generate(_) => cmd_generate(&c.config, &opts),
        Command::Score(_) => cmd_score(&c.config, &opts),
        Command::Report(_) => cmd_report(&c.config, &opts),
        Command::Run(_) => cmd_run(&c.config, &opts),
    };
    ExitCode::from(status.code() as u8)
}
