//! `sohkit` command-line front-end.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sohkit::analysis::SweepKind;

/// Toolkit and file-format versions, as printed by `--version`.
pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (schema 1.0)");

#[derive(Debug, Parser)]
#[command(name = "sohkit", version = VERSION, about = "Battery state-of-health indicators and capacity estimators")]
pub struct Cli {
    /// More log output on standard error (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    /// Toolkit configuration file (TOML). Missing keys take their defaults.
    #[arg(
        long,
        global = true,
        value_name = "FILE",
        long_help = concat!(
            "Toolkit configuration file (TOML). Missing keys take their defaults, which are:\n\n",
            include_str!("../../../configs/reference.toml")
        )
    )]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate an aging campaign into a directory of cycle files.
    Simulate(SimulateArgs),
    /// Extract per-cycle indicators from the cycles listed in a manifest.
    Extract(ExtractArgs),
    /// Pearson correlation of each feature with capacity loss.
    Correlate(CorrelateArgs),
    /// Correlation of windowed charging indicators over a voltage grid.
    Sweep(SweepArgs),
    /// Train a capacity estimator.
    Train(TrainArgs),
    /// Evaluate trained models on the cells they were not trained on.
    Estimate(EstimateArgs),
    /// Summarize evaluation tables into one JSON document.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Campaign spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the spec.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Indicator table to write.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads. Output does not depend on it.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Flip the current sign of the input files.
    #[arg(long)]
    invert_current: bool,
    /// Indicators to keep, e.g. `E_ch,E_dis`. Default: all.
    #[arg(long, value_delimiter = ',')]
    features: Option<Vec<String>>,
    /// Directory of `<cell>_charge.csv` OCV curves. Default: `ocv/` next to the manifest.
    #[arg(long)]
    ocv_dir: Option<PathBuf>,
    /// RPT table; with `--features-out`, also writes the feature matrix.
    #[arg(long, requires = "features_out")]
    rpt: Option<PathBuf>,
    #[arg(long, requires = "rpt")]
    features_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CorrelateArgs {
    /// Feature matrix CSV.
    #[arg(long, conflicts_with_all = ["indicators", "rpt"], required_unless_present = "indicators")]
    matrix: Option<PathBuf>,
    /// Indicator table, used with `--rpt` instead of `--matrix`.
    #[arg(long, requires = "rpt")]
    indicators: Option<PathBuf>,
    #[arg(long)]
    rpt: Option<PathBuf>,
    /// Manifest whose blocklist entries apply.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Features to correlate. Default: all.
    #[arg(long)]
    features: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SweepKindArg {
    Impedance,
    EnergyCh,
}

impl From<SweepKindArg> for SweepKind {
    fn from(k: SweepKindArg) -> Self {
        match k {
            SweepKindArg::Impedance => SweepKind::Impedance,
            SweepKindArg::EnergyCh => SweepKind::EnergyCh,
        }
    }
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    kind: SweepKindArg,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    rpt: PathBuf,
    /// One `<cell>.csv` per cell is written here.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    invert_current: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModelArg {
    Lrm,
    Armax,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// `single:<cell>` or `loo`.
    #[arg(long)]
    scenario: String,
    /// Feature matrix CSV.
    #[arg(long)]
    matrix: PathBuf,
    /// Predictors, e.g. `dE_ch,dE_dis`.
    #[arg(long)]
    features: String,
    #[arg(long, value_enum, default_value = "lrm")]
    model: ModelArg,
    /// ARMAX order grid `lo:hi` for every polynomial (default 0:3).
    #[arg(long, conflicts_with = "orders")]
    armax_grid: Option<String>,
    /// Fixed ARMAX orders `na,nb,nc`.
    #[arg(long)]
    orders: Option<String>,
    /// `capacity` or `loss`.
    #[arg(long, default_value = "capacity")]
    target: String,
    /// Model JSON to write.
    #[arg(long)]
    out: PathBuf,
    /// Grid-search log (CSV).
    #[arg(long)]
    grid_log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    /// Model JSON from `train`.
    #[arg(long)]
    model: PathBuf,
    /// Feature matrix CSV.
    #[arg(long)]
    matrix: PathBuf,
    /// One `<cell>.csv` evaluation table per test cell is written here.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Directory of evaluation tables.
    #[arg(long)]
    eval_dir: PathBuf,
    /// Summary JSON to write.
    #[arg(long)]
    out: PathBuf,
    /// Also writes every cell's capacity track into one CSV.
    #[arg(long)]
    tracks: Option<PathBuf>,
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 1 })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn version_carries_the_schema() {
        assert!(VERSION.ends_with(&format!("(schema {})", sohkit::io::SCHEMA_VERSION)));
    }

    #[test]
    fn arguments_are_consistent() {
        Cli::command().debug_assert();
    }
}
