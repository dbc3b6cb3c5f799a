//! `mmt` — experiment driver for the modular multilingual transformer.

mod commands;

use anyhow::Result;
use clap::{Parser, Subcommand};
use mmt_core::model::Variant;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "mmt", about = "Modular multilingual seq2seq experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multilingual corpora.
    GenerateData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the corpus files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain a model jointly over all languages (span corruption).
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory holding generated corpora.
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path; metrics land next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
    },
    /// Fine-tune a pretrained checkpoint on the source languages.
    Finetune {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Freeze config name (none, s1..s14).
        #[arg(long)]
        freeze: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on held-out task data per language.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune s1..s14 from one pretrain checkpoint and tabulate.
    SweepFreeze {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain + fine-tune at bottleneck sizes d/8, d/4, d/2, d.
    SweepBottleneck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank all language modules on the reserved unseen language.
    SweepModules {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::from_label(s).ok_or_else(|| format!("variant must be modular or dense, got {s:?}"))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenerateData { config, out } => {
            let config = commands::load_config(config.as_deref())?;
            commands::cmd_generate_data(&config, &out)
        }
        Command::Pretrain {
            config,
            data,
            out,
            seed,
            variant,
        } => {
            let mut config = commands::load_config(config.as_deref())?;
            commands::apply_overrides(&mut config, seed, None, variant)?;
            commands::cmd_pretrain(&config, &data, &out)
        }
        Command::Finetune {
            config,
            checkpoint,
            data,
            out,
            freeze,
            seed,
        } => commands::cmd_finetune(
            config.as_deref(),
            &checkpoint,
            &data,
            &out,
            freeze.as_deref(),
            seed,
        ),
        Command::Evaluate {
            checkpoint,
            data,
            out,
        } => commands::cmd_evaluate(&checkpoint, &data, out.as_deref()),
        Command::SweepFreeze {
            config,
            checkpoint,
            data,
            out,
        } => commands::cmd_sweep_freeze(config.as_deref(), &checkpoint, &data, &out),
        Command::SweepBottleneck { config, data, out } => {
            let config = commands::load_config(config.as_deref())?;
            commands::cmd_sweep_bottleneck(&config, &data, &out)
        }
        Command::SweepModules {
            checkpoint,
            data,
            out,
        } => commands::cmd_sweep_modules(&checkpoint, &data, out.as_deref()),
    }
}
