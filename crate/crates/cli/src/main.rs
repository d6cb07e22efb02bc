mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use config::Profile;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "POSEGAN_OUT";

#[derive(Parser, Debug)]
#[command(name = "posegan", version, about = "Pose-disentangling face GAN: data, training, synthesis and evaluation")]
pub struct Cli {
    /// Architecture and data defaults applied before the config file.
    #[arg(long, global = true, value_enum)]
    profile: Option<Profile>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset directory.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also train and store the pose oracle (oracle.ckpt).
        #[arg(long)]
        with_oracle: bool,
    },
    /// Fit a shape model on a landmark manifest.
    FitShapemodel {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Largest |pose code| after calibration.
        #[arg(long, default_value_t = 17.0)]
        code_extent: f64,
    },
    /// Train, writing checkpoints, a JSON-lines log and the resolved config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep the pose code for one input and write an image grid.
    Synth {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Input image (PPM or PNG); centre-cropped to the model size.
        #[arg(long, conflicts_with = "index")]
        image: Option<PathBuf>,
        /// Input sample index in the configured dataset.
        #[arg(long)]
        index: Option<usize>,
        /// Code range `lo:hi`; defaults to the checkpoint's training range.
        #[arg(long, allow_hyphen_values = true)]
        codes: Option<String>,
        #[arg(long, default_value_t = 9)]
        grid_steps: usize,
        /// Pose oracle checkpoint; prints the code/oracle correlation.
        #[arg(long)]
        oracle: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output grid file (.ppm or .png).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate with one protocol; writes CSV and JSON reports.
    Eval {
        #[arg(value_enum)]
        protocol: Protocol,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// fid: compare the real set against itself instead of generated images.
        #[arg(long, value_enum, default_value_t = FidAgainst::Generated)]
        against: FidAgainst,
        /// verify: read `identity,v1,...,vd` rows instead of extracting features.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    Fid,
    Rank1,
    Verify,
    Ablate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FidAgainst {
    Generated,
    Real,
}

/// An error with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Failure { code: 1, message: message.into() }
    }
}

impl From<posegan::Error> for Failure {
    fn from(e: posegan::Error) -> Self {
        use posegan::Error as E;
        let code = match e {
            E::Config(_) | E::Argument(_) | E::Ingestion { .. } | E::EmptyDataset(_) => 2,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
