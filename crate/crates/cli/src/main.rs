use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use edge_impute::config::FeedMode;
use edge_impute::correlation::MdMode;
use edge_impute::imputation::{SigmaMode, WgmWeighting};
use edge_impute::ingestion::SynthParams;
use edge_impute_cli::{
    cmd_grid, cmd_impute, cmd_rerun, cmd_synth, cmd_validate, CliError, Overrides, RunSummary,
};

/// Missing-value imputation experiments over multivariate device traces.
#[derive(Parser)]
#[command(name = "edge-impute", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment cell described by a config file.
    Impute {
        trace: PathBuf,
        schema: PathBuf,
        config: PathBuf,
        #[command(flatten)]
        out: OutDir,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Run every cell of a grid file and write one comparison table.
    Grid {
        trace: PathBuf,
        schema: PathBuf,
        grid: PathBuf,
        #[command(flatten)]
        out: OutDir,
        #[command(flatten)]
        overrides: OverrideArgs,
        /// Worker threads for independent cells; keep 1 for comparable timings.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Repeat a run from its manifest.txt.
    Rerun {
        manifest: PathBuf,
        /// Read the trace from here instead of the recorded path.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        out: OutDir,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write a synthetic correlated trace in the canonical layout.
    Synth {
        /// Trace file to write.
        out: PathBuf,
        /// Also write the matching schema file here.
        #[arg(long)]
        schema_out: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        devices: usize,
        #[arg(long, default_value_t = 100)]
        ticks: usize,
        #[arg(long, default_value_t = 4)]
        dims: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 20.0)]
        level: f64,
        /// Standard deviation of constant per-device offsets.
        #[arg(long, default_value_t = 0.0)]
        device_spread: f64,
    },
    /// Parse a trace and optionally check a config or grid against it.
    Validate {
        trace: PathBuf,
        schema: PathBuf,
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct OutDir {
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct OverrideArgs {
    /// Replace the configured seeds; repeat or separate with commas.
    #[arg(long = "seed", value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    feed: Option<FeedMode>,
    #[arg(long)]
    sigma_mode: Option<SigmaMode>,
    #[arg(long)]
    wgm_weighting: Option<WgmWeighting>,
    #[arg(long)]
    md_mode: Option<MdMode>,
}

impl From<OverrideArgs> for Overrides {
    fn from(a: OverrideArgs) -> Self {
        Overrides {
            seeds: a.seeds,
            feed: a.feed,
            sigma_mode: a.sigma_mode,
            wgm_weighting: a.wgm_weighting,
            md_mode: a.md_mode,
        }
    }
}

fn report_run(summary: &RunSummary) {
    for row in &summary.table.rows {
        let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.6}"));
        println!(
            "{:<22} replacements {:>6}  failures {:>4}  MAE {}  RMSE {}",
            row.config.label(),
            row.replacements,
            row.failures,
            fmt(row.mae),
            fmt(row.rmse)
        );
    }
    println!("wrote {}", summary.out_dir.display());
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Impute {
            trace,
            schema,
            config,
            out,
            overrides,
        } => {
            let summary = cmd_impute(&trace, &schema, &config, &overrides.into(), &out.out_dir)?;
            report_run(&summary);
        }
        Command::Grid {
            trace,
            schema,
            grid,
            out,
            overrides,
            jobs,
        } => {
            let summary = cmd_grid(
                &trace,
                &schema,
                &grid,
                &overrides.into(),
                &out.out_dir,
                jobs,
            )?;
            report_run(&summary);
        }
        Command::Rerun {
            manifest,
            trace,
            out,
            jobs,
        } => {
            let summary = cmd_rerun(&manifest, trace.as_deref(), &out.out_dir, jobs)?;
            report_run(&summary);
        }
        Command::Synth {
            out,
            schema_out,
            devices,
            ticks,
            dims,
            noise,
            seed,
            level,
            device_spread,
        } => {
            let params = SynthParams {
                level,
                device_spread,
                ..SynthParams::new(devices, ticks, dims, noise, seed)
            };
            let lines = cmd_synth(&params, &out, schema_out.as_deref())?;
            println!("wrote {} reports to {}", lines, out.display());
        }
        Command::Validate {
            trace,
            schema,
            config,
        } => {
            println!("{}", cmd_validate(&trace, &schema, config.as_deref())?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("edge-impute: {err}");
            ExitCode::from(err.code as u8)
        }
    }
}
