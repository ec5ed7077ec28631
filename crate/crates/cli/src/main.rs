//! `dereverb`: simulate a reverberant corpus, dereverberate it with WPE or USD,
//! score the results, and trace mixture-constraint loss curves.

mod config;
mod corpus;
mod dereverb;
mod eval;
mod losscurve;
mod simulate;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, configuration or input selection (exit 2).
    Usage(String),
    /// Failure while reading data or processing (exit 3).
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<dereverb_core::Error> for CliError {
    fn from(e: dereverb_core::Error) -> Self {
        use dereverb_core::Error as E;
        match e {
            E::Config(_) | E::SchemaVersion { .. } | E::MissingKey(_) | E::ManifestEntry { .. } => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "dereverb",
    version,
    about = "Unsupervised multi-microphone speech dereverberation"
)]
struct Cli {
    /// Worker threads for utterance-level parallelism (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    Wpe,
    Usd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Inference {
    /// Write the estimate itself.
    Direct,
    /// Write the mixture minus the reverberation predicted from the estimate.
    Subtractive,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a reverberant multi-microphone corpus and write its manifest.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of mono dry-speech WAVs; a synthetic source is used when omitted.
        #[arg(long)]
        dry_dir: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Fix T60 (seconds) for every scene.
        #[arg(long)]
        t60: Option<f64>,
    },
    /// Dereverberate every utterance of a manifest.
    Dereverb {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        system: System,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Channel count: 1, 2, 4 or all recorded channels.
        #[arg(long)]
        mics: Option<usize>,
        #[arg(long, value_enum, default_value_t = Inference::Direct)]
        inference: Inference,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score enhanced directories against the direct-path references.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory of `<utt_id>.wav` outputs, optionally as `name=dir`. Repeatable.
        #[arg(long = "enhanced-dir", required = true)]
        enhanced_dirs: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Loss of hypothesized estimates built from truncated relative RIRs.
    Losscurve {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        utt_id: String,
        #[arg(long, default_value_t = 10)]
        tau_step: usize,
        /// Largest truncation length in samples (default: RIR length).
        #[arg(long)]
        max_tau: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Print a one-line sparkline of the curve.
        #[arg(long)]
        sparkline: bool,
    },
}

/// Writes pretty JSON with a trailing newline.
pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, text)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn run(cli: Cli) -> CliResult<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        pool = pool.num_threads(jobs);
    }
    let pool = pool.build().map_err(|e| CliError::Runtime(e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Simulate {
            config,
            dry_dir,
            out_dir,
            count,
            seed,
            t60,
        } => simulate::run(simulate::Args {
            config,
            dry_dir,
            out_dir,
            count,
            seed,
            t60,
        }),
        Command::Dereverb {
            manifest,
            system,
            config,
            out_dir,
            mics,
            inference,
            seed,
        } => dereverb::run(dereverb::Args {
            manifest,
            system,
            config,
            out_dir,
            mics,
            inference,
            seed,
        }),
        Command::Eval {
            manifest,
            enhanced_dirs,
            out,
        } => eval::run(&manifest, &enhanced_dirs, &out),
        Command::Losscurve {
            manifest,
            utt_id,
            tau_step,
            max_tau,
            config,
            out,
            sparkline,
        } => losscurve::run(losscurve::Args {
            manifest,
            utt_id,
            tau_step,
            max_tau,
            config,
            out,
            sparkline,
        }),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
