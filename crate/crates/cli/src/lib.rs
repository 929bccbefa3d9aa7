//! Command-line workflows over the staged hip-fracture pipeline and the
//! review HTTP service.

pub mod commands;
pub mod service;
pub mod store;

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use hipline::config::RunConfig;
use hipline::phantom::Split;
use hipline::pipeline::Stage;
use hipline::workflow::{GridSpec, Protocol};
use hipline::{Error, Result};

use crate::commands::Context;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "hipline",
    version,
    about = "Staged hip-fracture detection on synthetic pelvis phantoms"
)]
pub struct Cli {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dataset directory (default: <output>/data).
    #[arg(long, global = true, env = "HIPLINE_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Suppress progress output.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Frontal,
    Bounding,
    Metal,
    Fracture,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Stage {
        match s {
            StageArg::Frontal => Stage::Frontal,
            StageArg::Bounding => Stage::Bounding,
            StageArg::Metal => Stage::Metal,
            StageArg::Fracture => Stage::Fracture,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    Full,
    Balanced,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the phantom dataset and write images plus manifest.
    Generate,
    /// Train one stage and write its checkpoint.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Continue from this checkpoint up to the configured epoch count.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run the full pipeline over a split and write per-hip dispositions.
    Run {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Clean the fracture labels with the review loop.
    CleanLabels {
        /// Reviewer strategy (oracle, confirm-all, external).
        #[arg(long)]
        reviewer: Option<String>,
    },
    /// Evaluate the fracture model behind the gates.
    Eval {
        #[arg(value_enum)]
        protocol: ProtocolArg,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Compare augmentation techniques by validation AUC.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Train every point of a hyperparameter grid and rank them.
    GridSearch {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// JSON object mapping setting paths to candidate values.
        #[arg(long)]
        grid: PathBuf,
    },
    /// Serve the review API over the open cleaning loop.
    ServeReview {
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

pub fn load_config(path: Option<&std::path::Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::data(format!("{}: {e}", p.display())))?;
            RunConfig::from_json(&text).map_err(|e| Error::data(format!("{}: {e}", p.display())))
        }
        None => Ok(RunConfig::default()),
    }
}

pub fn context(cli: &Cli) -> Result<Context> {
    let mut config = load_config(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    config.validate()?;
    let mut ctx = Context::new(config, cli.data_dir.clone(), cli.output_dir.clone());
    ctx.quiet = cli.quiet;
    Ok(ctx)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let ctx = context(cli)?;
    match &cli.command {
        Command::Generate => commands::generate(&ctx).map(drop),
        Command::Train { stage, resume } => {
            commands::train(&ctx, (*stage).into(), resume.as_deref()).map(drop)
        }
        Command::Run { split } => commands::run(&ctx, (*split).into()).map(drop),
        Command::CleanLabels { reviewer } => {
            commands::clean_labels(&ctx, reviewer.as_deref()).map(drop)
        }
        Command::Eval { protocol, split } => {
            let protocol = match protocol {
                ProtocolArg::Full => Protocol::Full,
                ProtocolArg::Balanced => Protocol::Balanced,
            };
            commands::eval(&ctx, (*split).into(), protocol).map(drop)
        }
        Command::Ablate { seeds } => commands::ablate(&ctx, seeds).map(drop),
        Command::GridSearch { stage, grid } => {
            let spec: GridSpec = store::read_json(grid)?;
            commands::grid_search(&ctx, (*stage).into(), &spec).map(drop)
        }
        Command::ServeReview { host, port } => service::serve(ctx, SocketAddr::new(*host, *port)),
    }
}

/// Parse, run and map the outcome to an exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
