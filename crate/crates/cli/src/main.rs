mod commands;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "ufema",
    version,
    about = "Noise-robust speaker verification experiments"
)]
struct Cli {
    /// Run directory name under UFEMA_RUNS_DIR (defaults to the config file stem)
    #[arg(long, global = true)]
    run: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic corpus, noise banks and trial lists as WAV files
    SynthCorpus {
        #[arg(long)]
        config: PathBuf,
        /// output directory (default: $UFEMA_DATA_DIR/<run>)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build and train the frozen enhancer ensemble
    TrainEnhancer {
        #[arg(long)]
        config: PathBuf,
    },
    /// Pretrain the speaker encoder on clean speech
    PretrainEncoder {
        #[arg(long)]
        config: PathBuf,
        /// continue from the last partial checkpoint
        #[arg(long)]
        resume: bool,
    },
    /// Jointly train fusion network and EMA encoder
    Train {
        #[arg(long)]
        config: PathBuf,
        /// ablation arm, e.g. `no-noisy-input`, `without-mask_net`, `fixed`
        #[arg(long)]
        ablate: Option<String>,
        /// continue from the last partial checkpoint
        #[arg(long)]
        resume: bool,
    },
    /// Score a trial list under each condition and report EER
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        /// comma list such as `clean,noise@-5,babble@0`; `all` for the full grid
        #[arg(long, default_value = "all")]
        conditions: String,
    },
    /// EER of the linear-interpolation baseline against the weight
    SweepInterp {
        #[arg(long)]
        ckpt: PathBuf,
        /// `start:stop:step` or a comma list
        #[arg(long, default_value = "0:1:0.1")]
        weights: String,
    },
    /// Train and evaluate every ablation arm at -5 dB
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    use ufema::Error as E;
    match err.chain().find_map(|e| e.downcast_ref::<E>()) {
        Some(E::InvalidArgument(_)) => "invalid_argument",
        Some(E::DegenerateInput(_)) => "degenerate_input",
        Some(E::ChannelCount(_)) => "channel_count",
        Some(E::UnsupportedFormat(_)) => "unsupported_format",
        Some(E::MissingFile(_)) => "missing_file",
        Some(E::Config { .. }) => "config",
        Some(E::UnknownKey(_)) => "unknown_key",
        Some(E::VersionMismatch { .. }) => "version_mismatch",
        Some(E::Checksum) => "checksum",
        Some(E::Format(_)) => "format",
        Some(E::Corruption(_)) => "corruption",
        Some(E::TrainingFailure(_)) => "training_failure",
        Some(E::PoolViolation(_)) => "pool_violation",
        Some(E::MissingUtterance(_)) => "missing_utterance",
        Some(E::EnhancerMismatch { .. }) => "enhancer_mismatch",
        Some(E::Locked(_)) => "locked",
        Some(E::Io(_)) => "io",
        Some(E::Wav(_)) => "wav",
        Some(E::Json(_)) => "json",
        None => "other",
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match commands::dispatch(cli.run.as_deref(), cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let msg = format!("{err:#}").replace('\n', " ");
            eprintln!("ufema-error kind={} message={msg:?}", error_kind(&err));
            ExitCode::FAILURE
        }
    }
}
