use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use twostage::surrogate::SurrogateConfig;
use twostage_cli::commands;
use twostage_cli::{exit, CliError, Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "twostage",
    version,
    about = "Two-stage confident credit scoring"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Run configuration (flat TOML); omitted keys take reference values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Ensemble variance threshold.
    #[arg(long, global = true, value_name = "F")]
    epsilon: Option<f64>,
    /// Decision thresholds, comma separated.
    #[arg(long, global = true, value_name = "F[,F...]", value_delimiter = ',')]
    tau: Option<Vec<f64>>,
    /// Ensemble size.
    #[arg(long, global = true, value_name = "N")]
    members: Option<usize>,
    /// Output directory for reports and tables.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Artifact store directory.
    #[arg(long, global = true, value_name = "DIR")]
    store: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Clean and split the raw CSV; record feature bounds.
    Ingest {
        /// Raw CSV, overriding `data_path`.
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
    /// Train the ensemble, resuming a compatible stored one.
    Train,
    /// Route query rows through both stages for every tau.
    Decide {
        /// Query CSV in the input layout; defaults to the stored test split.
        #[arg(long, value_name = "PATH")]
        query: Option<PathBuf>,
    },
    /// Run the censoring experiment on the cleaned dataset.
    Experiment,
    /// Write sensitivity-based feature importance.
    Importance,
    /// Write the out-of-distribution plot table.
    Plotdata,
    /// Write a synthetic dataset in the input layout.
    Synth {
        /// Destination CSV, overriding `data_path`.
        #[arg(long, value_name = "PATH")]
        output: Option<PathBuf>,
        /// Seed of the generator (independent of the run seed).
        #[arg(long, default_value_t = SurrogateConfig::default().seed)]
        synth_seed: u64,
        /// Number of rows with every field present.
        #[arg(long, default_value_t = SurrogateConfig::default().complete_rows)]
        complete_rows: usize,
        /// Emit complete rows only.
        #[arg(long)]
        complete_only: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = cli.global;
    let data_path = match &cli.command {
        Command::Ingest { data } => data.clone(),
        _ => None,
    };
    let overrides = Overrides {
        seed: g.seed,
        epsilon: g.epsilon,
        tau: g.tau,
        members: g.members,
        out_dir: g.out,
        data_path,
        store_dir: g.store,
    };
    let config = RunConfig::load(g.config.as_deref())?.apply(&overrides)?;

    match cli.command {
        Command::Ingest { .. } => {
            let m = commands::ingest(&config)?;
            for (k, v) in &m.counts {
                println!("{k}={v}");
            }
        }
        Command::Train => {
            let m = commands::train(&config)?;
            println!("members={}", m.counts["members"]);
            println!("ensemble_dir={}", config.ensemble_dir().display());
        }
        Command::Decide { query } => {
            let report = commands::decide(&config, query.as_deref())?;
            print!("{}", report.summary_csv());
        }
        Command::Experiment => {
            let report = commands::experiment(&config)?;
            print!("{}", report.summary());
        }
        Command::Importance => {
            let imp = commands::importance(&config)?;
            print!("{}", imp.to_csv());
        }
        Command::Plotdata => {
            let s = commands::plotdata(&config)?;
            println!("unconfident_rows={}", s.unconfident_rows);
            println!("background_rows={}", s.background_rows);
        }
        Command::Synth {
            output,
            synth_seed,
            complete_rows,
            complete_only,
        } => {
            let mut sc = if complete_only {
                SurrogateConfig::complete_only(synth_seed, complete_rows)
            } else {
                SurrogateConfig::default()
            };
            sc.seed = synth_seed;
            sc.complete_rows = complete_rows;
            let path = output.unwrap_or(config.data_path);
            let rows = commands::synth(&path, &sc)?;
            println!("rows={rows}");
            println!("path={}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
