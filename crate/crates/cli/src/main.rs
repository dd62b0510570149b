mod commands;
mod config;
mod manifest;

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use config::{Settings, KEYS};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, missing inputs or I/O trouble; exit code 1.
    #[error("{0}")]
    Usage(String),
    /// A non-finite loss or solve; exit code 2.
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numeric(_) => 2,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "ssgan",
    version,
    about = "Reconstruct images from simulated or recorded voxel responses"
)]
struct Cli {
    /// Settings file of `key = value` lines (`#` starts a comment).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Directory with external images; defaults to `external/` beside the dataset.
    #[arg(long, global = true)]
    external: Option<PathBuf>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    tolerance: bool,
    #[arg(long, global = true)]
    no_semantics: bool,
    #[arg(long, global = true)]
    no_augmentation: bool,
    /// Any setting as KEY=VALUE; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset into OUT/dataset and OUT/external.
    Simulate,
    /// Average test trials and re-binarize masks into OUT/preprocessed.
    Preprocess,
    /// Fit the shape decoder; writes OUT/shape.shd.
    TrainShape,
    /// Train the semantic network; writes OUT/semantic.sem.
    TrainSemantic,
    /// Train the generator from OUT/shape.shd and OUT/semantic.sem.
    TrainGan,
    /// Decode and reconstruct the test set into OUT/reconstructions and OUT/shapes.
    Reconstruct,
    /// Score reconstructions (metrics.csv) or decoded shapes (metrics-shape.csv).
    Evaluate {
        #[arg(long, value_enum, default_value_t = Metric::Recon)]
        metric: Metric,
    },
    /// Run an ablation; writes OUT/ablate-<kind>.csv.
    Ablate {
        #[arg(value_enum)]
        kind: AblateKind,
    },
    /// Collect every metrics and ablation CSV in OUT into report.csv.
    Report,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Recon,
    Shape,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblateKind {
    Roi,
    Semantics,
    Augmentation,
}

fn help_footer() -> String {
    let mut s = String::from("Settings (config file, --set, or the dedicated flags):\n");
    for (key, doc) in KEYS {
        let _ = writeln!(s, "  {key:<26} {doc}");
    }
    s.push_str(
        "\nCSV outputs:\n  \
         metrics*.csv, ablate-*.csv, report.csv: metric,condition,run,value\n    \
         metric is win_rate, ssim, shape_win_rate, shape_ssim, semantic_accuracy or\n    \
         reference_win_rate; run is a 1-based run index or `mean`.\n  \
         loss_log.csv: epoch,lr,d_loss,g_adv,g_l1,g_total\n\n\
         Every command writes run-<command>.json with the applied settings, the effective\n\
         configuration and the sha256 of each input and output.\n\n\
         Exit codes: 0 success, 1 invalid input or I/O failure, 2 numeric failure.\n",
    );
    s
}

fn settings_from(cli: &Cli) -> Result<Settings, CliError> {
    let mut s = Settings::default();
    if let Some(path) = &cli.config {
        s.apply_file(path)?;
    }
    let mut flags: Vec<(String, String)> = Vec::new();
    let path = |p: &PathBuf| p.to_string_lossy().into_owned();
    if let Some(v) = cli.seed {
        flags.push(("seed".into(), v.to_string()));
    }
    if let Some(p) = &cli.dataset {
        flags.push(("dataset".into(), path(p)));
    }
    if let Some(p) = &cli.out {
        flags.push(("out".into(), path(p)));
    }
    if let Some(p) = &cli.external {
        flags.push(("external".into(), path(p)));
    }
    if let Some(v) = cli.threads {
        flags.push(("threads".into(), v.to_string()));
    }
    for (on, key) in [
        (cli.tolerance, "tolerance"),
        (cli.no_semantics, "no_semantics"),
        (cli.no_augmentation, "no_augmentation"),
    ] {
        if on {
            flags.push((key.into(), "true".into()));
        }
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        flags.push((k.trim().into(), v.trim().into()));
    }
    for (k, v) in &flags {
        s.apply_flag(k, v)?;
    }
    Ok(s.seeded())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let settings = settings_from(&cli)?;
    ssgan::set_threads(settings.threads);
    let ctx = commands::Context::new(settings, cli.config.as_deref())?;
    match cli.command {
        Command::Simulate => commands::simulate(ctx),
        Command::Preprocess => commands::preprocess(ctx),
        Command::TrainShape => commands::train_shape(ctx),
        Command::TrainSemantic => commands::train_semantic(ctx),
        Command::TrainGan => commands::train_gan(ctx),
        Command::Reconstruct => commands::reconstruct(ctx),
        Command::Evaluate { metric } => commands::evaluate(ctx, metric),
        Command::Ablate { kind } => commands::ablate(ctx, kind),
        Command::Report => commands::report(ctx),
    }
}

fn main() -> ExitCode {
    let matches = match Cli::command().after_long_help(help_footer()).try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
