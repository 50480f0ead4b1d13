use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use caneflow::calib::GroupBy;
use caneflow::config::{CampaignConfig, Overrides};
use caneflow::flow::{LowLightPolicy, TransformSpec};
use caneflow::io::fmt6;
use caneflow::pipeline;
use caneflow::Error;

#[derive(Parser)]
#[command(name = "caneflow", version, about = "Volumetric mass-flow pipeline: simulate, estimate, calibrate, report")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate frames, pulses and ground truth for a campaign.
    Simulate {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        common: Common,
        /// Campaign seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Keep only the first N runs (lab) or N loads per group (field).
        #[arg(long)]
        runs: Option<usize>,
        /// Fixed duration of every lab run, seconds.
        #[arg(long)]
        duration: Option<f64>,
        #[command(flatten)]
        estimator: EstimatorFlags,
        #[command(flatten)]
        flow: FlowFlags,
    },
    /// Turn point-cloud frames into per-frame volume estimates.
    Estimate {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        estimator: EstimatorFlags,
    },
    /// Accumulate runs, calibrate densities and write CV, fit and shift reports.
    Calibrate {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flow: FlowFlags,
    },
    /// Write a one-page summary of a calibrated campaign.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// Output directory holding the manifest and artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct Source {
    /// Campaign config file (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in campaign: lab or field.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args)]
struct EstimatorFlags {
    /// Height grid cell size, meters.
    #[arg(long)]
    cell_size: Option<f64>,
    /// Reduce each cell with this percentile instead of the mean.
    #[arg(long)]
    percentile: Option<f64>,
    /// Minimum illuminance for good-light frames, lux.
    #[arg(long)]
    lux_gate: Option<f64>,
}

#[derive(Args)]
struct FlowFlags {
    /// Volume transform for predicted mass: identity or sqrt.
    #[arg(long)]
    transform: Option<TransformSpec>,
    /// Low-light frames: include or exclude.
    #[arg(long)]
    low_light: Option<LowLightPolicy>,
    /// Grouping keys, e.g. year,region,crop or none.
    #[arg(long)]
    group_by: Option<GroupBy>,
}

impl Source {
    fn load(&self) -> Result<Option<CampaignConfig>, Error> {
        match (&self.config, &self.preset) {
            (Some(path), _) => CampaignConfig::load(path).map(Some),
            (None, Some(name)) => CampaignConfig::preset(name).map(Some),
            (None, None) => Ok(None),
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate { source, common, seed, runs, duration, estimator, flow } => {
            let mut cfg = source.load()?.map_or_else(|| CampaignConfig::preset("lab"), Ok)?;
            cfg.apply(&Overrides {
                seed,
                runs,
                duration,
                transform: flow.transform,
                cell_size: estimator.cell_size,
                percentile: estimator.percentile,
                lux_gate: estimator.lux_gate,
                low_light: flow.low_light,
                group_by: flow.group_by,
            })?;
            let manifest = pipeline::simulate(&cfg, &common.out)?;
            println!("simulated {} {} runs into {}", manifest.runs.len(), manifest.campaign, common.out.display());
        }
        Command::Estimate { source, common, estimator } => {
            let expected = source.load()?;
            let o = Overrides {
                cell_size: estimator.cell_size,
                percentile: estimator.percentile,
                lux_gate: estimator.lux_gate,
                ..Default::default()
            };
            let s = pipeline::estimate(&common.out, &o, expected.as_ref())?;
            println!("estimated {} frames over {} runs", s.frames, s.runs);
            for l in &s.by_lux {
                println!("  {:>8} lux: {:>5}% low-light frames", fmt6(l.lux), fmt6(l.low_light_pct));
            }
        }
        Command::Calibrate { source, common, flow } => {
            let expected = source.load()?;
            let o = Overrides {
                transform: flow.transform,
                low_light: flow.low_light,
                group_by: flow.group_by,
                ..Default::default()
            };
            let s = pipeline::calibrate(&common.out, &o, expected.as_ref())?;
            for c in &s.cv {
                println!("  {}: n {} cv {}% cv_sqrt {}%", c.group, c.n_loads, fmt6(c.cv_identity), fmt6(c.cv_sqrt));
            }
            if let Some(f) = s.fit.sqrt {
                println!("  sqrt fit: slope {} r_squared {}", fmt6(f.slope), fmt6(f.r_squared));
            }
        }
        Command::Report { common } => {
            print!("{}", pipeline::report(&common.out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("caneflow: error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
