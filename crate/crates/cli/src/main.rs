use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use skillmdp_cli::{cmd_eval, cmd_inspect, cmd_metrics, cmd_train, load_config, parse_override_args, CliError};

#[derive(Parser)]
#[command(
    name = "skillmdp",
    version,
    about = "Train, evaluate and inspect evolving skill pools"
)]
struct Cli {
    /// Log progress (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the rollout and evolution loop, writing a run directory.
    Train {
        /// JSON config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Config overrides by dotted path, e.g. --pool.batch_size=4.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Roll out a frozen pool and print a metrics report.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Pool file to evaluate without evolving it.
        #[arg(long)]
        pool: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Config overrides by dotted path.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// List the skills and lineage of a pool file.
    Inspect { pool: PathBuf },
    /// Recompute metrics.json and plot.csv from a run directory.
    Metrics { run_dir: PathBuf },
}

fn pretty<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("reports serialize")
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, overrides } => {
            let config = load_config(config.as_deref(), &parse_override_args(&overrides)?)?;
            let summary = cmd_train(&config)?;
            let last = summary.records.last();
            println!(
                "trained {} batch(es) into {}; final pool {} skill(s), last mean return {}",
                summary.records.len(),
                summary.run_dir.display(),
                summary.pool_size,
                last.map_or("n/a".to_string(), |r| format!("{:.3}", r.mean_return))
            );
        }
        Command::Eval {
            config,
            pool,
            out,
            overrides,
        } => {
            let config = load_config(config.as_deref(), &parse_override_args(&overrides)?)?;
            let report = pretty(&cmd_eval(&config, &pool)?);
            if let Some(out) = out {
                std::fs::write(&out, format!("{report}\n")).map_err(|e| CliError::io("cannot write", &out, e))?;
            }
            println!("{report}");
        }
        Command::Inspect { pool } => print!("{}", cmd_inspect(&pool)?),
        Command::Metrics { run_dir } => println!("{}", pretty(&cmd_metrics(&run_dir)?)),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
