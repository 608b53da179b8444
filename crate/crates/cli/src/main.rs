//! `finrank`: ingest data, build the BM25 index, train re-rankers, rank and
//! evaluate.

mod commands;
mod failure;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use failure::Failure;

#[derive(Debug, Parser)]
#[command(name = "finrank", version, about = "Answer selection for non-factoid financial questions")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags accepted by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Data root; defaults to $FINRANK_DATA_DIR, then the current directory.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// File of `key = value` lines; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub k1: Option<f64>,
    #[arg(long, global = true)]
    pub b: Option<f64>,
    /// BM25 candidates passed to the re-ranker [default: 50]
    #[arg(long, global = true)]
    pub pool_size: Option<usize>,
    /// Answers kept per question [default: 10]
    #[arg(long, global = true)]
    pub top_k: Option<usize>,
    #[arg(long, global = true)]
    pub max_len: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Load checkpoints whose vocabulary hash differs from the data root's.
    #[arg(long, global = true)]
    pub allow_vocab_mismatch: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainObjective {
    Pointwise,
    Pairwise,
    Hinge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FineTuneObjective {
    Pointwise,
    Pairwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SampleLayout {
    Pointwise,
    Pairwise,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Clean raw questions, answers and judgments, split the questions and
    /// build the vocabulary inside the data root.
    Ingest {
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        answers: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        /// Train, validation and test shares: fractions or exact counts.
        #[arg(long, default_value = "0.8,0.1,0.1")]
        split: String,
        /// Minimum token frequency for the vocabulary.
        #[arg(long, default_value_t = 1)]
        min_count: usize,
        /// Extra `id<TAB>text` files whose tokens join the vocabulary.
        #[arg(long)]
        vocab_text: Vec<PathBuf>,
    },
    /// Build the inverted index over the answer corpus.
    Index {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// BM25 run for one split, `pool_size` answers deep.
    Retrieve {
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Training samples from BM25 candidate pools.
    BuildSamples {
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, value_enum, default_value = "pointwise")]
        mode: SampleLayout,
        /// Pairs kept per question in pairwise mode.
        #[arg(long)]
        cap: Option<usize>,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune a cross-encoder (pointwise, pairwise) or train a QA-LSTM (hinge).
    Train {
        #[arg(long, value_enum)]
        objective: TrainObjective,
        #[arg(long)]
        samples: Option<PathBuf>,
        #[arg(long)]
        valid_samples: Option<PathBuf>,
        /// Encoder checkpoint from `pretrain-mlm` to start from.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Masked-LM further pre-training of the encoder on the answer corpus.
    PretrainMlm {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune on a general data root, then adapt on the target data root.
    Tanda {
        #[arg(long)]
        general: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, value_enum, default_value = "pointwise")]
        objective: FineTuneObjective,
        #[arg(long)]
        init: Option<PathBuf>,
        /// Directory for both stage checkpoints; defaults to the target root.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-rank an existing candidate run with a trained model.
    Rerank {
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        candidates: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retrieve `pool_size` candidates and keep the re-ranked `top_k`.
    Pipeline {
        #[arg(long, default_value = "test")]
        split: String,
        /// Re-ranker checkpoint; BM25 ranks alone when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// MRR@10, NDCG@10 and Precision@1 of a run against judgments.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Answer questions typed on standard input; `:quit` leaves.
    Query {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(failure::EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::dispatch(&cli.common, &cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, message }) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}
