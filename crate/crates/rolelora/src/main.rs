use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rolelora::commands;
use rolelora::CliError;
use rolelora_core::evalkit::Suite;
use rolelora_core::incremental::Strategy;

/// Multi-character role-playing adapters on a toy language model.
#[derive(Parser)]
#[command(name = "rolelora", version)]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Fusion,
    Expansion,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    All,
    Grid,
    Gating,
    Transfer,
}

#[derive(Subcommand)]
enum Command {
    /// Build the base model, one adapter block per role and the gate.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Add one role to a checkpoint.
    AddRole {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        profile: PathBuf,
        #[arg(long, value_enum)]
        strategy: StrategyArg,
        /// Dialogue JSONL; required for expansion.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Talk to a checkpoint, from a script or line by line on stdin.
    Chat {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long)]
        max_tokens: Option<usize>,
    },
    /// Compute evaluation proxies and write a JSON report (plus grid CSV).
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        suite: SuiteArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write the profile and dialogue data of a synthetic character.
    SynthRole {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 9)]
        index: usize,
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut out = io::stdout().lock();
    match cli.command {
        Command::Pretrain { config, out: dir } => commands::pretrain(&config, &dir, &mut out),
        Command::AddRole { ckpt, profile, strategy, data, out: dir } => {
            let strategy = match strategy {
                StrategyArg::Fusion => Strategy::Fusion,
                StrategyArg::Expansion => Strategy::Expansion,
            };
            commands::add_role(&ckpt, &profile, strategy, data.as_deref(), &dir, &mut out).map(|_| ())
        }
        Command::Chat { ckpt, script, max_tokens } => {
            commands::chat(&ckpt, script.as_deref(), max_tokens, &mut io::stdin().lock(), &mut out)
        }
        Command::Eval { ckpt, suite, out: report } => {
            let suite = match suite {
                SuiteArg::All => Suite::All,
                SuiteArg::Grid => Suite::Grid,
                SuiteArg::Gating => Suite::Gating,
                SuiteArg::Transfer => Suite::Transfer,
            };
            commands::eval(&ckpt, suite, &report, &mut out)
        }
        Command::Gradcheck { config } => commands::gradcheck(&config, &mut out),
        Command::SynthRole { config, index, profile, data } => {
            commands::synth_role(&config, index, &profile, &data, &mut out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Invalid(e.to_string().lines().next().unwrap_or("bad arguments").to_string());
            eprintln!("{e}");
            eprintln!("{}", err.json_line());
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.json_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
