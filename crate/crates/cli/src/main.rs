//! `wavesense`: preprocess audio into spike rasters, generate synthetic
//! datasets, train, evaluate, stream-detect, gradient-check and inspect
//! WaveSense networks.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "wavesense",
    about = "Spiking temporal-convolution networks for streaming keyword spotting",
    version
)]
struct Cli {
    /// Seed applied end to end (dataset generation, init, training order).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (falls back to WAVESENSE_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a WAV manifest into spike-raster datasets.
    Preprocess {
        /// Manifest: path<TAB>label<TAB>split[<TAB>duration] per line.
        #[arg(long)]
        manifest: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Directory of noise WAVs mixed into the training split.
        #[arg(long)]
        noise_dir: Option<PathBuf>,
        /// Signal-to-noise ratio of the mix, dB.
        #[arg(long, default_value_t = 5.0)]
        snr_db: f64,
        /// Standardized clip length, seconds.
        #[arg(long, default_value_t = 5.0)]
        seconds: f64,
        /// Number of filterbank bands.
        #[arg(long, default_value_t = 64)]
        n_bands: usize,
        /// Copies of each training clip, each with a fresh noise draw.
        #[arg(long, default_value_t = 1)]
        augment: usize,
    },
    /// Generate a synthetic spike-pattern dataset.
    SynthData {
        /// Generator spec (key = value).
        #[arg(long)]
        spec: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network on a raster dataset.
    Train {
        /// Network + trainer config (key = value).
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory (train.idx / val.idx).
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Metrics log (JSON lines); defaults to <out>.metrics.jsonl.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Override config keys, e.g. --set lr=0.003.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Stop once validation accuracy reaches this value.
        #[arg(long)]
        early_stop_acc: Option<f64>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Streaming detection over a raster with a threshold sweep.
    Stream {
        #[arg(long)]
        ckpt: PathBuf,
        /// Raster stream (.wsras).
        #[arg(long)]
        stream: PathBuf,
        /// Labels: class<TAB>start<TAB>end per line.
        #[arg(long)]
        labels: PathBuf,
        /// Highest acceptable false-alarm rate per hour.
        #[arg(long, default_value_t = 0.5)]
        target_faph: f64,
        /// Per-class lockout after a detection, seconds.
        #[arg(long, default_value_t = 1.0)]
        lockout: f64,
        /// Matching tolerance around labeled keywords, seconds.
        #[arg(long, default_value_t = 0.75)]
        match_window: f64,
        /// Threshold grid resolution.
        #[arg(long, default_value_t = 40)]
        grid_points: usize,
    },
    /// Check BPTT gradients against finite differences.
    Gradcheck {
        /// Network config; a built-in four-block config when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        /// Check the spiking network (informational: the surrogate is not
        /// the true derivative).
        #[arg(long)]
        spiking: bool,
    },
    /// Report architecture numbers of a checkpoint or config.
    Inspect {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems exit 1 (clap would default to 2).
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let threads = cli.threads.or_else(|| {
        std::env::var("WAVESENSE_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        // A second initialization attempt is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match commands::run(cli.command, cli.seed) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
