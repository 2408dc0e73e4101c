//! Command-line entry point.
//!
//! Exit codes: 0 on success, 1 on a usage error (bad flags or arguments),
//! 2 on a runtime failure (missing files, bad data, divergence).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use signfuse::harness;

#[derive(Parser)]
#[command(
    name = "signfuse",
    version,
    about = "Dual-stream sign-language translation on synthetic corpora",
    long_about = "Generates synthetic signing corpora, trains a dual-stream \
                  (gesture + mouthing) translation model with contrastive \
                  alignment, evaluates checkpoints, runs stream/alignment \
                  ablations, and exports 2-D embedding projections."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a corpus and write it to a directory.
    Generate {
        /// Run configuration file (key=value lines); defaults apply if omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output corpus directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overwrite existing outputs.
        #[arg(long)]
        force: bool,
    },
    /// Train a model on a stored corpus.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus directory produced by `generate`.
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory for train_log.tsv and model.ckpt.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Score a checkpoint on a corpus's test split.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint file produced by `train`.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory for eval.tsv and hypotheses.tsv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train and score all stream/alignment variants on one corpus.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for ablation.tsv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Export per-frame fused embeddings projected to two dimensions.
    ExportEmb {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Output TSV file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn run(cli: Cli) -> signfuse::Result<String> {
    match cli.cmd {
        Cmd::Generate { config, out, seed, force } => {
            let cfg = harness::load_run_config(config.as_deref(), seed)?;
            harness::cmd_generate(&cfg, &out, force)
        }
        Cmd::Train { config, corpus, out, seed, force } => {
            let cfg = harness::load_run_config(config.as_deref(), seed)?;
            harness::cmd_train(&cfg, &corpus, &out, force)
        }
        Cmd::Eval { config, ckpt, corpus, out, force } => {
            let cfg = harness::load_run_config(config.as_deref(), None)?;
            harness::cmd_eval(&ckpt, &corpus, &out, cfg.train.batch_size, force)
        }
        Cmd::Ablate { config, out, seed, force } => {
            let cfg = harness::load_run_config(config.as_deref(), seed)?;
            harness::cmd_ablate(&cfg, &out, force)
        }
        Cmd::ExportEmb { ckpt, corpus, out, force } => {
            harness::cmd_export_embeddings(&ckpt, &corpus, &out, force)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
