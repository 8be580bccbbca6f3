use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use physgan::dynsim::Split;
use physgan::experiment::{
    cmd_evaluate, cmd_simulate, cmd_sweep, cmd_train, exit_code, CommandOptions, ExperimentConfig,
    Overrides,
};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    Simulate,
    Train,
    Evaluate,
    Sweep,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    Eval,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
            SplitArg::Eval => Split::Eval,
        }
    }
}

/// Physics-informed adversarial force and joint-angle estimation from sEMG.
///
/// Outputs land in `<out>/<run-id>/<command>`.
#[derive(Debug, Parser)]
#[command(name = "physgan", version)]
struct Cli {
    command: Command,
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory (default: the run's simulate output).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output root, overriding `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
    /// Overrides both the data and the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue training from the newest checkpoint of this run.
    #[arg(long)]
    resume: bool,
    /// Replace existing output for this run id.
    #[arg(long)]
    overwrite: bool,
    /// Print the config with all defaults filled in and exit.
    #[arg(long)]
    print_effective_config: bool,
    /// Checkpoint to evaluate (default: the run's final model).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Split scored by `evaluate`.
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let overrides = Overrides {
        out_dir: cli.out.clone(),
        run_id: cli.run_id.clone(),
        seed: cli.seed,
    };
    let result = ExperimentConfig::load(&cli.config, &overrides).and_then(|cfg| {
        if cli.print_effective_config {
            return cfg.effective_toml();
        }
        let opts = CommandOptions {
            data: cli.data.clone(),
            checkpoint: cli.checkpoint.clone(),
            split: cli.split.into(),
            resume: cli.resume,
            overwrite: cli.overwrite,
        };
        match cli.command {
            Command::Simulate => cmd_simulate(&cfg, &opts),
            Command::Train => cmd_train(&cfg, &opts),
            Command::Evaluate => cmd_evaluate(&cfg, &opts),
            Command::Sweep => cmd_sweep(&cfg, &opts),
        }
    });
    match result {
        Ok(msg) => {
            println!("{}", msg.trim_end());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
