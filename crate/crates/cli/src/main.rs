//! `predilect`: train, ablate, verify and classify from a JSON run config.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "predilect", version, about = "Predilection-prior fundus/OCT/text alignment at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes the checkpoint and `<out stem>.loss.csv`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare the three OCT stand-ins across the configured seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Monte-Carlo rank agreement between ideal and proxy attention logits.
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero-shot classification of fundus samples against class prompts.
    Classify {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        classes: PathBuf,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Prompt template with {NAME} and {ABBR} placeholders.
        #[arg(long)]
        template: Option<String>,
    },
    /// Finite-difference check of the full backward pass.
    Gradcheck {
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Write the configured synthetic world as JSON.
    ExportWorld {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write held-out samples and a classes file for `classify`.
    MakeSamples {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 40)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        classes_out: PathBuf,
        #[arg(long)]
        samples_out: PathBuf,
        #[arg(long)]
        unlabelled: bool,
    },
}

fn main() -> ExitCode {
    let result = match Cli::parse().command {
        Command::Train { config, out } => commands::train_cmd(&config, &out),
        Command::Ablate { config, out_dir } => commands::ablate_cmd(&config, &out_dir),
        Command::Verify { config, out } => commands::verify_cmd(&config, &out),
        Command::Classify {
            ckpt,
            classes,
            samples,
            out,
            template,
        } => commands::classify_cmd(&ckpt, &classes, &samples, &out, template.as_deref()),
        Command::Gradcheck { corrupt_backward } => commands::gradcheck_cmd(corrupt_backward),
        Command::ExportWorld { config, out } => commands::export_world_cmd(&config, &out),
        Command::MakeSamples {
            config,
            count,
            seed,
            classes_out,
            samples_out,
            unlabelled,
        } => commands::make_samples_cmd(&config, count, seed, &classes_out, &samples_out, unlabelled),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
