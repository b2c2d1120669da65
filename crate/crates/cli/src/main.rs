//! `ssp`: data generation, self-supervised post-training, fine-tuning and
//! retrieval evaluation from the command line.

mod commands;
mod manifest;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "ssp", version = manifest::VERSION, about = "Self-supervised post-training for conversational dense retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command that reads a configuration.
#[derive(Args, Clone, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` configuration; the reference defaults apply otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key (repeatable); wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run seed; falls back to the config's `seed`, then SSP_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world: conversations, corpus, qrels and teacher pairs.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a vocabulary from conversations and documents.
    Vocab {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, num_args = 1.., required = true)]
        conversations: Vec<PathBuf>,
        #[arg(long, num_args = 1..)]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build self-supervised training instances.
    BuildData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        conversations: PathBuf,
        /// Sessions to draw off-topic prefixes from; defaults to the conversations.
        #[arg(long)]
        noise_pool: Option<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the frozen teacher on self-contained query/document pairs.
    PretrainTeacher {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Post-train the student with the self-supervised objective.
    PostTrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Instance directory written by `build-data`, or an instance file.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint holding the teacher.
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Fine-tune the student with distillation only.
    FineTune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Target-task conversations with reformulations.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Encode the corpus with the teacher into a dense index.
    Index {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieve for each conversation and score the run.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Score retrieval with 0..=N off-topic utterances prepended.
    Robustness {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        noise_pool: Option<PathBuf>,
        #[arg(long, default_value_t = 6)]
        max_added: usize,
    },
    /// Render a robustness curve or training-metrics CSV as SVG.
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a configuration file with every key.
    InitConfig {
        #[arg(long, value_enum, default_value_t = Preset::Reference)]
        preset: Preset,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone)]
pub struct TrainArgs {
    /// Student to start from; with --resume, the run to continue.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Continue the optimizer state and position stored in --checkpoint.
    #[arg(long, requires = "checkpoint")]
    pub resume: bool,
    /// Override the configured number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Stop after this many optimizer steps (the checkpoint stays resumable).
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone)]
pub struct EvalArgs {
    #[arg(long)]
    pub conversations: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub qrels: PathBuf,
    /// Encode queries with the checkpoint's teacher instead of its student.
    #[arg(long)]
    pub use_teacher: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Preset {
    /// The reference hyperparameters.
    Reference,
    /// Settings that train in seconds on the synthetic corpus.
    Desk,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { cfg, out } => commands::generate(&cfg, &out),
        Command::Vocab {
            cfg,
            conversations,
            corpus,
            out,
        } => commands::vocab(&cfg, &conversations, &corpus, &out),
        Command::BuildData {
            cfg,
            conversations,
            noise_pool,
            vocab,
            out,
        } => commands::build_data(&cfg, &conversations, noise_pool.as_deref(), &vocab, &out),
        Command::PretrainTeacher { cfg, pairs, vocab, out } => commands::pretrain_teacher(&cfg, &pairs, &vocab, &out),
        Command::PostTrain {
            cfg,
            train,
            data,
            teacher,
        } => commands::post_train(&cfg, &train, &data, &teacher),
        Command::FineTune { cfg, train, data, vocab } => commands::fine_tune(&cfg, &train, &data, &vocab),
        Command::Index {
            cfg,
            corpus,
            checkpoint,
            vocab,
            out,
        } => commands::index(&cfg, &corpus, &checkpoint, &vocab, &out),
        Command::Eval { cfg, eval } => commands::eval(&cfg, &eval),
        Command::Robustness {
            cfg,
            eval,
            noise_pool,
            max_added,
        } => commands::robustness(&cfg, &eval, noise_pool.as_deref(), max_added),
        Command::Plot { input, out } => commands::plot(&input, &out),
        Command::InitConfig { preset, out } => commands::init_config(preset, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
