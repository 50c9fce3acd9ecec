pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "hyperfscil",
    version,
    about = "Few-shot class-incremental learning on frozen embeddings"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic embedding bundle.
    GenData(GenDataArgs),
    /// Train and evaluate one full session stream.
    Run(RunArgs),
    /// Run the four ssp/hyp combinations, or a curvature sweep.
    Ablate(AblateArgs),
    /// Recompute Avg and PD from report files or bare accuracy rows.
    Report(ReportArgs),
    /// Export one session's prototype-text distance matrix.
    Heatmap(HeatmapArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value = "synthetic-fine")]
    pub preset: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Default, Args)]
pub struct ConfigArgs {
    /// JSON config; keys override the preset, flags override the file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    /// Bundle directory written by gen-data or an external exporter.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, overrides_with = "no_ssp")]
    pub ssp: bool,
    #[arg(long, overrides_with = "ssp")]
    pub no_ssp: bool,
    #[arg(long, overrides_with = "no_hyp")]
    pub hyp: bool,
    #[arg(long, overrides_with = "hyp")]
    pub no_hyp: bool,
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub base_epochs: Option<usize>,
    #[arg(long)]
    pub base_lr: Option<f64>,
    #[arg(long)]
    pub base_batch: Option<usize>,
    #[arg(long)]
    pub inc_epochs: Option<usize>,
    #[arg(long)]
    pub inc_lr: Option<f64>,
    #[arg(long)]
    pub inc_batch: Option<usize>,
}

fn flag_pair(on: bool, off: bool) -> Option<bool> {
    match (on, off) {
        (true, _) => Some(true),
        (_, true) => Some(false),
        _ => None,
    }
}

impl ConfigArgs {
    pub fn overrides(&self) -> config::Overrides {
        config::Overrides {
            preset: self.preset.clone(),
            dataset: self.dataset.clone(),
            out: self.out.clone(),
            ssp: flag_pair(self.ssp, self.no_ssp),
            hyp: flag_pair(self.hyp, self.no_hyp),
            c: self.c,
            tau: self.tau,
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            rank: self.rank,
            seed: self.seed,
            base_epochs: self.base_epochs,
            base_lr: self.base_lr,
            base_batch: self.base_batch,
            inc_epochs: self.inc_epochs,
            inc_lr: self.inc_lr,
            inc_batch: self.inc_batch,
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Comma-separated seeds; defaults to the resolved config seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Comma-separated curvatures; switches to a curvature sweep with ssp and hyp on.
    #[arg(long, value_delimiter = ',')]
    pub sweep_c: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// report.json files written by `run`.
    pub reports: Vec<PathBuf>,
    /// Bare per-session accuracies, comma separated. Repeatable.
    #[arg(long = "row")]
    pub rows: Vec<String>,
    /// Also write the summary as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub report: PathBuf,
    /// Session index; defaults to the last one.
    #[arg(long)]
    pub session: Option<usize>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Dispatches a parsed command line. `env_seed` is the raw seed environment
/// variable, if set.
pub fn execute(cli: Cli, env_seed: Option<&str>, stdout: &mut dyn std::io::Write) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a, env_seed, stdout),
        Command::Run(a) => commands::run(&a, env_seed, stdout).map(|_| ()),
        Command::Ablate(a) => commands::ablate(&a, env_seed, stdout).map(|_| ()),
        Command::Report(a) => commands::report(&a, stdout).map(|_| ()),
        Command::Heatmap(a) => commands::heatmap(&a, stdout),
    }
}
