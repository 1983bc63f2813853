use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mkrem::recon::Algorithm;
use mkrem_cli::{demo, DemoOptions, Experiment, ExperimentConfig, Result};

/// Regularized multi-kernel EM reconstruction experiments.
///
/// Exit status: 0 success, 1 configuration or I/O error, 2 missing or
/// malformed upstream artifacts, 3 numerical failure.
#[derive(Parser)]
#[command(name = "mkrem", version)]
struct Cli {
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration (TOML). Defaults are used when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,

    /// Overrides the configured output directory.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(out) = &self.output {
            cfg.output = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the phantom, priors and noisy sinograms.
    Phantom(ConfigArgs),
    /// Build kernels, dictionaries and the graph Laplacian (cached).
    Build(ConfigArgs),
    /// Reconstruct every realization and write image traces.
    Reconstruct {
        #[command(flatten)]
        config: ConfigArgs,
        /// Algorithms to run (mlem, mlem_f, kem, krem, mkrem); defaults to the config list.
        #[arg(short, long, value_delimiter = ',')]
        algorithm: Vec<Algorithm>,
    },
    /// Write AMSE, bias/variance and profile tables and image renders.
    Report(ConfigArgs),
    /// AMMSE against the reconstruction kernel width J_a.
    Sweep(ConfigArgs),
    /// Full low-count pipeline with the default parameters.
    Demo {
        #[arg(short, long, default_value = "demo-out")]
        output: PathBuf,
        /// Image width and height in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 10)]
        realizations: usize,
        #[arg(long, default_value_t = 100)]
        iterations: usize,
        /// Seed of the Poisson noise.
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        /// Also run the J_a sweep.
        #[arg(long)]
        sweep: bool,
    },
}

fn run(cmd: Command) -> Result<()> {
    let exp = match cmd {
        Command::Phantom(c) => {
            let exp = Experiment::new(c.load()?);
            exp.phantom()?;
            exp
        }
        Command::Build(c) => {
            let exp = Experiment::new(c.load()?);
            let report = exp.build()?;
            for (stage, status) in &report.stages {
                println!("{stage}: {status:?}");
            }
            exp
        }
        Command::Reconstruct { config, algorithm } => {
            let exp = Experiment::new(config.load()?);
            let algs = if algorithm.is_empty() {
                exp.cfg.recon.algorithms.clone()
            } else {
                algorithm
            };
            exp.reconstruct(&algs)?;
            exp
        }
        Command::Report(c) => {
            let exp = Experiment::new(c.load()?);
            exp.report()?;
            exp
        }
        Command::Sweep(c) => {
            let exp = Experiment::new(c.load()?);
            for r in exp.sweep()? {
                println!("{} J_a={} AMMSE={:.6} at {}", r.algorithm, r.ja, r.ammse, r.iteration);
            }
            exp
        }
        Command::Demo {
            output,
            size,
            realizations,
            iterations,
            seed,
            sweep,
        } => demo(&DemoOptions {
            output,
            size,
            realizations,
            iterations,
            seed,
            sweep,
        })?,
    };
    exp.finish()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
