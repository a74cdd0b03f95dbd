use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use cospec_core::harness::{
    cmd_diagnose, cmd_gen_tasks, cmd_report, cmd_run, cmd_train, ExperimentConfig, Stage,
};

#[derive(Parser)]
#[command(name = "cospec", version, about = "Collaborative speculative decoding experiments")]
struct Cli {
    /// TOML experiment config; built-in defaults fill missing keys.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set engine.K=15`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Sft,
    Rl,
}

#[derive(Subcommand)]
enum Command {
    /// Write the task suite.
    GenTasks,
    /// Evaluate the configured methods and write results.csv.
    Run,
    /// Train the arbitrator.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Start RL from a reject-all policy instead of the warm-up.
        #[arg(long)]
        no_warmup: bool,
    },
    /// Mismatch breakdown and complementarity report.
    Diagnose {
        /// reject, accept, oracle, learned, or a policy file.
        #[arg(long, default_value = "learned")]
        policy: String,
    },
    /// Merge result files into one table.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(short, long, default_value = "merged.csv")]
        out: PathBuf,
    },
    /// Print the default configuration.
    DefaultConfig,
}

fn run(cli: Cli) -> cospec_core::Result<()> {
    let load = || ExperimentConfig::load(cli.config.as_deref(), &cli.overrides);
    match cli.command {
        Command::GenTasks => {
            let path = cmd_gen_tasks(&load()?)?;
            println!("{}", path.display());
        }
        Command::Run => {
            let cfg = load()?;
            for r in cmd_run(&cfg)? {
                println!(
                    "{:<24} {:<10} speed {:>7.3}  tau {:>7.3}  score {:.4}",
                    r.method, r.benchmark, r.speed, r.tau, r.score
                );
            }
            println!("{}", cfg.out_dir.join("results.csv").display());
        }
        Command::Train { stage, no_warmup } => {
            let stage = match stage {
                StageArg::Sft => Stage::Sft,
                StageArg::Rl => Stage::Rl,
            };
            let path = cmd_train(&load()?, stage, no_warmup)?;
            println!("{}", path.display());
        }
        Command::Diagnose { policy } => {
            let path = cmd_diagnose(&load()?, &policy)?;
            println!("{}", path.display());
        }
        Command::Report { files, out } => {
            print!("{}", cmd_report(&files, &out)?);
        }
        Command::DefaultConfig => print!("{}", cospec_core::harness::DEFAULT_CONFIG),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("COSPEC_LOG", "error")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
