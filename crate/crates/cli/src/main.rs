//! `vecgauge`: dataset rendering, training, detection, reading, evaluation
//! and gradient checks from one JSON config.

mod commands;
mod config;
mod overlay;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or config: exit 1.
    Usage(String),
    /// Unreadable or inconsistent inputs: exit 2.
    Data(String),
    /// Non-finite training loss or a failed gradient check: exit 3.
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "vecgauge", version, about = "Pointer detection and analog meter reading")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Render synthetic dials with annotations, templates and a split.
    RenderDataset {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model; writes checkpoints and a JSON-lines report.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect pointer vectors in images.
    Detect {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory (meter boxes from its annotations) or a directory of PNGs.
        #[arg(long)]
        images: PathBuf,
        /// Output JSON file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for overlay PNGs.
        #[arg(long)]
        overlays: Option<PathBuf>,
    },
    /// Detect and read meters against templates.
    Read {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        templates: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        overlays: Option<PathBuf>,
    },
    /// OKS/VDS AP-AR and reading error on a dataset split.
    Evaluate {
        #[arg(long, required_unless_present = "detections", conflicts_with = "detections")]
        ckpt: Option<PathBuf>,
        /// Score a detections file from `detect` instead of running a model.
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Perturbation settings such as `scale:0.5`, `mask_tip:3`, `mask_tail:9`.
        #[arg(long, num_args = 1..)]
        perturb: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference checks of every op and a toy end-to-end model.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::RenderDataset {
            config,
            out,
            count,
            seed,
        } => commands::render_dataset(config.as_deref(), &out, count, seed),
        Cmd::Train { config, data, out } => commands::train(config.as_deref(), &data, &out),
        Cmd::Detect {
            ckpt,
            images,
            out,
            config,
            overlays,
        } => commands::detect(config.as_deref(), &ckpt, &images, &out, overlays.as_deref()),
        Cmd::Read {
            ckpt,
            images,
            templates,
            out,
            config,
            overlays,
        } => commands::read(config.as_deref(), &ckpt, &images, &templates, &out, overlays.as_deref()),
        Cmd::Evaluate {
            ckpt,
            detections,
            data,
            perturb,
            out,
            config,
        } => commands::evaluate(config.as_deref(), ckpt.as_deref(), detections.as_deref(), &data, &perturb, &out),
        Cmd::Gradcheck { config, out } => commands::gradcheck(config.as_deref(), out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
