use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use opinf_cli::{list_experiments, ConfigError, ExperimentConfig, Pipeline, PipelineOptions, StageError};
use opinf_core::costmodel::{default_kinds, ratio_table, write_ratio_csv};

#[derive(Parser)]
#[command(name = "opinf", version, about = "Operator-inference reduced-order model experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full-order simulations and store the trajectories.
    Simulate(RunArgs),
    /// Compute the POD basis (simulating first if needed).
    Reduce(RunArgs),
    /// Train every configured family (reusing stored data).
    Train(RunArgs),
    /// Roll out stored models and write results.csv.
    Evaluate(RunArgs),
    /// Full pipeline from scratch.
    Run(RunArgs),
    /// Print the evaluation-cost ratio table as CSV.
    Cost {
        /// Basis dimensions, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,32,64,128")]
        k: Vec<usize>,
    },
    /// Print the experiment catalog with defaults as JSON.
    List,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output root; the run directory is `<out>/<experiment>-<hash>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Also write cost_ratios.csv for the configured K values.
    #[arg(long)]
    cost: bool,
    #[arg(long, short)]
    quiet: bool,
}

enum Failure {
    Config(ConfigError),
    Stage(StageError),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        Failure::Stage(e)
    }
}

fn pipeline(args: &RunArgs) -> Result<Pipeline, ConfigError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
        cfg.validate()?;
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    let options = PipelineOptions {
        jobs: args.jobs.max(1),
        cost: args.cost,
        verbose: !args.quiet,
    };
    Ok(Pipeline::new(cfg, &out, options))
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::List => {
            println!("{}", serde_json::to_string_pretty(&list_experiments()).expect("json"));
        }
        Command::Cost { k } => {
            let rows = ratio_table(&default_kinds(), &k).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            let mut out = std::io::stdout().lock();
            write_ratio_csv(&rows, &mut out).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            out.flush().ok();
        }
        Command::Simulate(args) => {
            let p = pipeline(&args)?;
            p.write_metadata()?;
            p.simulate()?;
            println!("{}", p.run_dir.display());
        }
        Command::Reduce(args) => {
            let p = pipeline(&args)?;
            p.write_metadata()?;
            let snaps = p.snapshots()?;
            p.reduce(&snaps)?;
            println!("{}", p.run_dir.display());
        }
        Command::Train(args) => {
            let p = pipeline(&args)?;
            p.write_metadata()?;
            let snaps = p.snapshots()?;
            let pod = p.pod(&snaps)?;
            p.train(&snaps, &pod)?;
            println!("{}", p.run_dir.display());
        }
        Command::Evaluate(args) => {
            let p = pipeline(&args)?;
            p.write_metadata()?;
            let snaps = p.snapshots()?;
            let pod = p.pod(&snaps)?;
            let models = match p.load_models()? {
                Some(m) => m,
                None => p.train(&snaps, &pod)?,
            };
            let records = p.evaluate(&snaps, &pod, &models)?;
            p.export(&records)?;
            println!("{}", p.run_dir.join("results.csv").display());
        }
        Command::Run(args) => {
            let p = pipeline(&args)?;
            let outcome = p.run()?;
            println!("{}", outcome.run_dir.join("results.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
