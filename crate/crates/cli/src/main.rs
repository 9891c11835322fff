//! `c2datt` command-line front end.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "c2datt", version, about = "Speaker embedding training and verification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract log mel-filterbank features from a WAV file.
    Feats {
        #[arg(long)]
        wav: PathBuf,
        /// Feature configuration (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an embedding network.
    Train {
        /// `speaker_id<TAB>wav_path` lines.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model_config: PathBuf,
        #[arg(long)]
        train_config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides the seed used for initialization and data order.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Segment utterances and store their embeddings.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, conflicts_with = "list", required_unless_present = "list")]
        wav: Option<PathBuf>,
        /// Text file with one WAV path per line.
        #[arg(long)]
        list: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trial list and write a score file.
    Score(ScoreArgs),
    /// Score a trial list and report EER and minDCF.
    Eval(ScoreArgs),
    /// Export the attention weight plane of one block.
    Attmap {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        /// `res{stage}.{block}` or `res{stage}.last`.
        #[arg(long, default_value = "res2.last")]
        block: String,
        /// CSV output, rows = frequency, columns = channel.
        #[arg(long)]
        out: PathBuf,
        /// Optional grayscale PGM rendering of the same matrix.
        #[arg(long)]
        pgm: Option<PathBuf>,
    },
    /// Report trainable parameter counts.
    Params {
        /// Model configuration (TOML); defaults apply when omitted.
        #[arg(long)]
        model_config: Option<PathBuf>,
    },
    /// Write a synthetic multi-speaker corpus with trials and augmentation pools.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 20)]
        speakers: usize,
        #[arg(long, default_value_t = 50)]
        utts: usize,
        #[arg(long, default_value_t = 10)]
        held_out: usize,
        #[arg(long, default_value_t = 3.0)]
        min_seconds: f64,
        #[arg(long, default_value_t = 6.0)]
        max_seconds: f64,
        #[arg(long, default_value_t = 200)]
        target_trials: usize,
        #[arg(long, default_value_t = 200)]
        nontarget_trials: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// Checkpoint used to embed WAV paths missing from `--embeddings`.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Precomputed embedding store.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    trials: PathBuf,
    /// Cohort for AS-norm: an embedding store or a list of WAV paths.
    #[arg(long)]
    cohort: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    topk: usize,
    /// Report raw scores only.
    #[arg(long)]
    no_asnorm: bool,
    #[arg(long)]
    out: PathBuf,
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("C2DATT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("C2DATT_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| format!("configuring thread pool: {e}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
