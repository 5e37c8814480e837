//! povmap: drive the synthetic poverty-mapping pipeline from a TOML config.
//!
//! `povmap all --config configs/default.toml` runs every stage; each stage
//! is also its own subcommand so any artifact can be rebuilt in isolation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod config;
mod mapgen;
mod pipeline;

use config::{load_config, Overrides, Resolution, SectorChoice};
use povmap_core::tiler::WeightScheme;

#[derive(Parser)]
#[command(
    name = "povmap",
    version,
    about = "Synthetic poverty mapping: generate a world, train a tile CNN, aggregate, evaluate, map"
)]
struct Cli {
    #[command(subcommand)]
    command: CliCommand,
}

#[derive(Subcommand)]
enum CliCommand {
    /// Generate the synthetic world and render its imagery tiles.
    Synth(RunArgs),
    /// Compute benchmarks, the validation split, the tile manifest, and
    /// normalization statistics.
    Tile(RunArgs),
    /// Train the tile classifier on the survey-train stratum.
    Train(RunArgs),
    /// Predict tile distributions and aggregate them per municipality.
    Predict(RunArgs),
    /// Score predictions against benchmarks across strata and sectors.
    Evaluate(RunArgs),
    /// Emit the GeoJSON and PNG choropleth.
    Map(RunArgs),
    /// Run every stage in order.
    All(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Pipeline configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the tile aggregation weighting scheme.
    #[arg(long, value_enum)]
    weighting: Option<WeightingArg>,
    /// Override the imagery resolution preset.
    #[arg(long, value_enum)]
    resolution: Option<ResolutionArg>,
    /// Override the sector filter applied to map outputs.
    #[arg(long, value_enum)]
    sector: Option<SectorArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum WeightingArg {
    Area,
    Population,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ResolutionArg {
    High,
    Medium,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SectorArg {
    All,
    Urban,
    Rural,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            weighting: self.weighting.map(|w| match w {
                WeightingArg::Area => WeightScheme::Area,
                WeightingArg::Population => WeightScheme::Population,
            }),
            resolution: self.resolution.map(|r| match r {
                ResolutionArg::High => Resolution::High,
                ResolutionArg::Medium => Resolution::Medium,
            }),
            sector: self.sector.map(|s| match s {
                SectorArg::All => SectorChoice::All,
                SectorArg::Urban => SectorChoice::Urban,
                SectorArg::Rural => SectorChoice::Rural,
            }),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match &cli.command {
        CliCommand::Synth(a) => (pipeline::Command::Synth, a),
        CliCommand::Tile(a) => (pipeline::Command::Tile, a),
        CliCommand::Train(a) => (pipeline::Command::Train, a),
        CliCommand::Predict(a) => (pipeline::Command::Predict, a),
        CliCommand::Evaluate(a) => (pipeline::Command::Evaluate, a),
        CliCommand::Map(a) => (pipeline::Command::Map, a),
        CliCommand::All(a) => (pipeline::Command::All, a),
    };
    let result =
        load_config(&args.config, &args.overrides()).and_then(|cfg| pipeline::run(command, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error:#}");
            ExitCode::FAILURE
        }
    }
}
