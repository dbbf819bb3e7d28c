mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pima::dataset::SplitTag;
use pima::verify::{Fault, VerifySizes};

use crate::commands::Common;
use crate::error::CliError;

/// Multimodal clustering with physics expert decoders.
///
/// Log verbosity follows the PIMA_LOG environment variable (default info).
#[derive(Parser)]
#[command(name = "pima", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a multimodal model, keeping the best-validation and final checkpoints.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Distill unimodal encoders from a trained model.
    Distill {
        #[command(flatten)]
        common: CommonArgs,
        /// Model checkpoint [default: OUT/best.pima].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Modality to distill [default: all].
        #[arg(long)]
        modality: Option<String>,
    },
    /// Score multimodal and cross-modal cluster assignments against labels.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Restrict cross-modal scoring to one modality.
        #[arg(long)]
        modality: Option<String>,
        /// Distilled encoders to score [default: OUT/distilled-*.pima].
        #[arg(long)]
        distilled: Vec<PathBuf>,
    },
    /// Generate one modality from another.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Input modality.
        #[arg(long)]
        modality: String,
        /// Output modality [default: from the config, or the other modality].
        #[arg(long)]
        target: Option<String>,
        /// Distilled encoder for the input [default: OUT/distilled-MODALITY.pima].
        #[arg(long)]
        distilled: Option<PathBuf>,
    },
    /// Run the numerical verification suite.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write verify.json here instead of printing the report.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "full")]
        sizes: SizesArg,
        #[arg(long, value_enum, default_value = "none")]
        fault: FaultArg,
    },
}

#[derive(Args)]
struct CommonArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for SplitTag {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitTag::Train,
            SplitArg::Val => SplitTag::Val,
            SplitArg::Test => SplitTag::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SizesArg {
    Full,
    Tiny,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    None,
    KlSignFlip,
}

impl CommonArgs {
    fn load(self) -> Result<Common, CliError> {
        Ok(Common {
            config: config::load(&self.config)?,
            seed: self.seed,
            out: self.out,
        })
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { common } => commands::train(&common.load()?),
        Command::Distill {
            common,
            checkpoint,
            modality,
        } => commands::distill_cmd(&common.load()?, checkpoint.as_deref(), modality.as_deref()),
        Command::Evaluate {
            common,
            checkpoint,
            split,
            modality,
            distilled,
        } => commands::evaluate(&common.load()?, checkpoint.as_deref(), split.into(), modality.as_deref(), &distilled),
        Command::Generate {
            common,
            checkpoint,
            split,
            modality,
            target,
            distilled,
        } => commands::generate(
            &common.load()?,
            checkpoint.as_deref(),
            split.into(),
            &modality,
            target.as_deref(),
            distilled.as_deref(),
        ),
        Command::Verify { seed, out, sizes, fault } => {
            let sizes = match sizes {
                SizesArg::Full => VerifySizes::full(),
                SizesArg::Tiny => VerifySizes::tiny(),
            };
            let fault = match fault {
                FaultArg::None => Fault::None,
                FaultArg::KlSignFlip => Fault::KlSignFlip,
            };
            commands::verify(seed, sizes, fault, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PIMA_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
