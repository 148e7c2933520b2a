use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use schubert::commands::{
    self, GenCorpusOpts, PretrainOpts, PruneOpts, PruneOverrides, ReportFormat, SweepOpts,
};
use schubert::{Error, Objective, Penalty, Real, DEFAULT_FLOPS_SEQ_LEN};

#[derive(Parser)]
#[command(
    name = "schubert",
    about = "Structured pruning workbench for BERT-style encoders",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Params,
    Flops,
}

impl From<ObjectiveArg> for Objective {
    fn from(value: ObjectiveArg) -> Self {
        match value {
            ObjectiveArg::Params => Objective::Params,
            ObjectiveArg::Flops => Objective::Flops,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PenaltyArg {
    L1,
    Prox,
}

impl From<PenaltyArg> for Penalty {
    fn from(value: PenaltyArg) -> Self {
        match value {
            PenaltyArg::L1 => Penalty::L1,
            PenaltyArg::Prox => Penalty::Prox,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from scratch and write a checkpoint plus loss curve
    Pretrain {
        /// Architecture config JSON
        #[arg(long)]
        config: PathBuf,
        /// Corpus file (one sentence per line, blank line between documents)
        #[arg(long)]
        corpus: PathBuf,
        /// Number of Adam steps
        #[arg(long, default_value_t = 400)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        /// Adam learning rate
        #[arg(long, default_value_t = 1e-3)]
        lr: Real,
        /// Global dropout rate (0 disables)
        #[arg(long, default_value_t = 0.0)]
        dropout: Real,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the regularize-truncate-extract-finetune schedule on a checkpoint
    Prune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Optional prune config JSON; flags below override its fields
        #[arg(long)]
        prune_config: Option<PathBuf>,
        /// Regularization coefficient γ
        #[arg(long)]
        gamma: Option<Real>,
        /// Target reduction fraction η in [0, 1)
        #[arg(long)]
        eta: Option<f64>,
        /// Number of pruning rounds T
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long, value_enum)]
        objective: Option<ObjectiveArg>,
        #[arg(long, value_enum)]
        penalty: Option<PenaltyArg>,
        /// α-optimization steps per round
        #[arg(long)]
        regularize_steps: Option<usize>,
        /// Fine-tune steps per round
        #[arg(long)]
        finetune_steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the exact parameter breakdown and cost weights for a config
    Count {
        #[arg(long)]
        config: PathBuf,
        /// Count only weight matrices (no biases/layer norms/heads/positions)
        #[arg(long, default_value_t = false)]
        weights_only: bool,
        /// Sequence length for the FLOPs figure
        #[arg(long, default_value_t = DEFAULT_FLOPS_SEQ_LEN)]
        flops_seq: usize,
    },
    /// Emit per-layer dimension tables from records, configs or reports
    Report {
        /// rounds.jsonl, an ArchConfig .json, or an existing report (.csv/.json)
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: FormatArg,
        /// Write here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pre-train at several depths, resizing the hidden width to a budget
    SweepLayers {
        #[arg(long)]
        config: PathBuf,
        /// Depths to try, e.g. --ell 2 --ell 4
        #[arg(long = "ell", required = true)]
        ell_list: Vec<usize>,
        /// Parameter budget every row must meet within 2%
        #[arg(long)]
        budget: u64,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a seeded synthetic corpus
    GenCorpus {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        sentences: usize,
        /// Approximate distinct word count
        #[arg(long, default_value_t = 160)]
        words: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run() -> schubert::Result<()> {
    match Cli::parse().command {
        Command::Pretrain {
            config,
            corpus,
            steps,
            seed,
            batch_size,
            lr,
            dropout,
            out,
        } => commands::pretrain(&PretrainOpts {
            config,
            corpus,
            steps,
            seed,
            batch_size,
            lr,
            dropout,
            out,
        }),
        Command::Prune {
            checkpoint,
            corpus,
            prune_config,
            gamma,
            eta,
            rounds,
            objective,
            penalty,
            regularize_steps,
            finetune_steps,
            seed,
            out,
        } => commands::prune(&PruneOpts {
            checkpoint,
            corpus,
            prune_config,
            overrides: PruneOverrides {
                gamma,
                eta,
                rounds,
                objective: objective.map(Into::into),
                penalty: penalty.map(Into::into),
                regularize_steps,
                finetune_steps,
                seed,
            },
            out,
        }),
        Command::Count {
            config,
            weights_only,
            flops_seq,
        } => {
            print!("{}", commands::count(&config, weights_only, flops_seq)?);
            Ok(())
        }
        Command::Report { input, format, out } => {
            let format = match format {
                FormatArg::Csv => ReportFormat::Csv,
                FormatArg::Json => ReportFormat::Json,
            };
            let text = commands::report(&input, format)?;
            match out {
                Some(path) => std::fs::write(path, text)?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::SweepLayers {
            config,
            ell_list,
            budget,
            corpus,
            steps,
            seed,
            out,
        } => {
            let text = commands::sweep_layers(&SweepOpts {
                config,
                ell_list,
                budget,
                corpus,
                steps,
                seed,
            })?;
            match out {
                Some(path) => std::fs::write(path, text)?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::GenCorpus {
            seed,
            sentences,
            words,
            out,
        } => commands::gen_corpus(&GenCorpusOpts {
            seed,
            sentences,
            words,
            out,
        }),
    }
}

fn exit_code(error: &Error) -> u8 {
    match error {
        Error::Infeasible { .. } => 2,
        Error::NonFinite { .. } | Error::Numeric { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
