mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use replik::Error;

#[derive(Parser, Debug)]
#[command(name = "replik", version, about = "Noise-robust immune repertoire classification")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "REPLIK_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key (repeatable), e.g. `--set alpha=0.9`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainingArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Hyper-parameter profile.
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Disable asymmetric self-adaptive label correction.
    #[arg(long)]
    no_asa: bool,
    /// Disable co-training.
    #[arg(long)]
    no_cotrain: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ProfileArg {
    Cmv,
    Cancer,
    Custom,
}

#[derive(ValueEnum, Debug, Clone, Copy, Default)]
pub enum ColumnsArg {
    /// cdr3, v_gene, d_gene, j_gene, frequency
    #[default]
    Default,
    /// amino_acid, v_gene, j_gene, productive_frequency
    Immuneaccess,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with ground truth.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model (or a co-trained pair) on one fold rotation.
    Train {
        /// Dataset directory, manifest JSON or metadata TSV.
        #[arg(long)]
        data: PathBuf,
        /// Separate validation dataset; without it a fold of `--data` is held out.
        #[arg(long)]
        val_data: Option<PathBuf>,
        #[command(flatten)]
        training: TrainingArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate trained models on a labeled dataset.
    Eval {
        /// Directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Known disease-associated sequences (enables sequence-level AUC).
        #[arg(long)]
        known: Option<PathBuf>,
        /// Restrict to repertoires with this role in the model's split (train, validation or test).
        #[arg(long)]
        role: Option<String>,
        /// Match known sequences on CDR3 and V gene instead of CDR3 alone.
        #[arg(long)]
        match_v: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score one repertoire file; prints a TSV to standard output.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        repertoire: PathBuf,
        #[arg(long, value_enum, default_value_t)]
        columns: ColumnsArg,
    },
    /// k-fold cross-validation.
    Cv {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        known: Option<PathBuf>,
        #[command(flatten)]
        training: TrainingArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ablation over training modes and seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        known: Option<PathBuf>,
        #[command(flatten)]
        training: TrainingArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Usage and configuration problems exit with 2, everything else with 3.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_)
        | Error::InvalidConfig(_)
        | Error::MissingColumn { .. }
        | Error::Io { .. }
        | Error::Parse { .. }
        | Error::Checkpoint(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    }
    let result = match cli.command {
        Command::Synth { config, out } => commands::synth(&config, &out),
        Command::Train {
            data,
            val_data,
            training,
            out,
        } => commands::train(&data, val_data.as_deref(), &training, &out),
        Command::Eval {
            model,
            data,
            known,
            role,
            match_v,
            out,
        } => commands::eval(&model, &data, known.as_deref(), role.as_deref(), match_v, &out),
        Command::Predict {
            model,
            repertoire,
            columns,
        } => commands::predict(&model, &repertoire, columns),
        Command::Cv {
            data,
            known,
            training,
            out,
        } => commands::cv(&data, known.as_deref(), &training, &out),
        Command::Ablate {
            data,
            known,
            training,
            out,
        } => commands::ablate(&data, known.as_deref(), &training, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
