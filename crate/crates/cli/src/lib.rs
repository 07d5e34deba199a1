//! The `tips` command-line driver.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

pub use config::PipelineConfig;

#[derive(Debug, Parser)]
#[command(name = "tips", version, about = "Text-guided pose synthesis: data, training, inference and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory [default: $TIPS_OUT_DIR or ./tips-out].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dataset directory [default: <out>/dataset].
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    /// Attribute schema (TOML).
    #[arg(long, global = true)]
    pub schema: Option<PathBuf>,
    /// Training iterations (epochs for the refiner) or interpolation steps.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Image size in pixels.
    #[arg(long, global = true)]
    pub size: Option<usize>,
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    /// Source pose from keypoints.
    #[value(alias = "partially-text")]
    Partial,
    /// Source pose from its description.
    #[value(alias = "fully-text")]
    Full,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic stick-figure dataset.
    SynthData {
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        test_samples: Option<usize>,
    },
    /// Train the text-to-pose generator and critic.
    TrainT2p {
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Train the facial keypoint refiner.
    TrainRefiner,
    /// Train the pose renderer.
    TrainRender {
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        max_pairs: Option<usize>,
    },
    /// Render test pairs with poses generated from text.
    Infer {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Score inference outputs against ground truth.
    Eval {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Score the ground truth against itself.
        #[arg(long)]
        real: bool,
    },
    /// Render a sequence along an embedding interpolation.
    InterpDemo,
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit code: 0 on success, 1 on usage errors, 2 on failures.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    0
                }
                _ => {
                    eprint!("{}", e.render());
                    1
                }
            };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match commands::run(&cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err:#}");
            2
        }
    }
}
