use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use contilab_core::pipeline::{self, Overrides, RunConfig};
use contilab_core::ErrorKind;

/// Continual pretraining pipeline: vocabulary, base pretraining, domain
/// adaptation with forgetting mitigation, MLM evaluation, fine-tuning and
/// dataset realignment.
#[derive(Parser, Debug)]
#[command(name = "contilab", version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Forgetting-mitigation preset for `adapt`.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Run seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; overrides the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the WordPiece vocabulary on the tokenizer corpora.
    VocabTrain,
    /// Pretrain a base model, or resume one from `--checkpoint`.
    Pretrain {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Continue pretraining `--parent` on the domain corpus.
    Adapt {
        #[arg(long)]
        parent: PathBuf,
    },
    /// Score a checkpoint with MRR and PPPL.
    EvalMlm {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Fine-tune a checkpoint on the configured tasks, once per seed.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Translate a task dataset and realign its annotations.
    Realign,
    /// Print a checkpoint's lineage, fingerprint and architecture.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write a synthetic workspace with corpora, tasks and a configuration.
    Synth,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli.config.as_deref().ok_or_else(|| contilab_core::Error::Config("--config is required for this command".into()))?;
    let mut cfg = RunConfig::load(path)?;
    cfg.apply(&Overrides { seed: cli.seed, out: cli.out.clone(), preset: cli.preset.clone() })?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let summary = match &cli.command {
        Command::Inspect { checkpoint } => {
            print!("{}", pipeline::inspect(checkpoint)?);
            return Ok(());
        }
        Command::Synth => {
            let dir = cli.out.as_deref().unwrap_or(Path::new("synthetic"));
            let path = pipeline::write_synthetic_workspace(dir, cli.seed.unwrap_or(1))?;
            println!("wrote synthetic workspace; configuration at {}", path.display());
            return Ok(());
        }
        Command::VocabTrain => pipeline::vocab_train(&load_config(cli)?)?,
        Command::Pretrain { checkpoint } => pipeline::pretrain(&load_config(cli)?, checkpoint.as_deref())?,
        Command::Adapt { parent } => pipeline::adapt(&load_config(cli)?, parent)?,
        Command::EvalMlm { checkpoint } => pipeline::eval_mlm(&load_config(cli)?, checkpoint)?,
        Command::Finetune { checkpoint } => pipeline::finetune(&load_config(cli)?, checkpoint)?,
        Command::Realign => pipeline::realign(&load_config(cli)?)?,
    };
    print!("{}", summary.text);
    println!("run directory: {}", summary.dir.display());
    Ok(())
}

/// 2 input, 3 configuration, 4 numeric, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<contilab_core::Error>().map(contilab_core::Error::kind) {
        Some(ErrorKind::Input | ErrorKind::Integrity | ErrorKind::Io) => 2,
        Some(ErrorKind::Config) => 3,
        Some(ErrorKind::Numeric) => 4,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
