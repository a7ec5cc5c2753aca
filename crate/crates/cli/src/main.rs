use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use propscale::datapipe::{load_manifest, Split};
use propscale::harness::RunConfig;
use propscale::model::Mode;
use propscale_cli::*;

/// Propagation-scale forecasting: simulate, prepare, train, evaluate, ablate.
///
/// Log verbosity follows PROPSCALE_LOG (error, warn, info, debug, trace).
#[derive(Parser, Debug)]
#[command(name = "propscale", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// JSON configuration file; missing keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override such as `train.epochs=5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// One seed for simulation, split, initialization and training.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Drop the hypergraph encoders.
    #[arg(long)]
    no_gcn: bool,
    /// Input days.
    #[arg(long)]
    window: Option<usize>,
    /// Forecast days.
    #[arg(long)]
    horizon: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let flags = Overrides {
            seed: self.seed,
            mode: self.mode,
            no_gcn: self.no_gcn,
            window: self.window,
            horizon: self.horizon,
        };
        resolve(self.config.as_deref(), &self.sets, &flags)
    }

    /// Rejects explicit window or horizon flags that contradict a prepared dataset.
    fn check_dataset(&self, data: &std::path::Path) -> Result<(), CliError> {
        let m = load_manifest(data)?;
        let clash = |flag: Option<usize>, have: usize| flag.is_some_and(|v| v != have);
        if clash(self.window, m.window) || clash(self.horizon, m.horizon) {
            return Err(CliError::config(format!(
                "dataset was prepared with window {} and horizon {}",
                m.window, m.horizon
            )));
        }
        Ok(())
    }
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: propscale::model::ModelError| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: propscale::datapipe::DataError| e.to_string())
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic trace and order log.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build window examples, item splits and the manifest.
    Prepare {
        /// Directory holding trace.jsonl and orders.jsonl.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Defaults to the data directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one variant and report every split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// train, val or test; every non-empty split when omitted.
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every mode with and without the hypergraph encoders.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify the propagation identity on the raw logs.
    OracleCheck {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
}

fn run(cli: Cli) -> Result<serde_json::Value, CliError> {
    use serde_json::json;
    Ok(match cli.command {
        Command::Simulate { cfg, out } => {
            let s = cmd_simulate(&cfg.resolve()?, &out)?;
            json!({ "snapshots": s.snapshots, "orders": s.orders, "out": out })
        }
        Command::Prepare { data, cfg, out } => {
            let out = out.unwrap_or_else(|| data.clone());
            let ds = cmd_prepare(&data, &cfg.resolve()?, &out)?;
            json!({
                "train_items": ds.items(Split::Train).len(),
                "val_items": ds.items(Split::Val).len(),
                "test_items": ds.items(Split::Test).len(),
                "out": out,
            })
        }
        Command::Train { data, cfg, out } => {
            cfg.check_dataset(&data)?;
            let s = cmd_train(&data, &cfg.resolve()?, &out)?;
            let test = s.report.split(Split::Test).map(|m| m.msle);
            json!({ "model": s.report.model, "best_epoch": s.best_epoch, "epochs": s.epochs_run, "test_msle": test })
        }
        Command::Evaluate { checkpoint, data, split, out } => {
            let r = cmd_evaluate(&checkpoint, &data, split, &out)?;
            let splits: serde_json::Map<_, _> =
                r.splits.iter().map(|s| (s.split.clone(), json!({ "msle": s.msle, "mape": s.mape }))).collect();
            json!({ "model": r.model, "splits": splits })
        }
        Command::Ablate { data, cfg, out } => {
            cfg.check_dataset(&data)?;
            let t = cmd_ablate(&data, &cfg.resolve()?, &out)?;
            println!("{}", t.to_markdown());
            json!({ "rows": t.rows.len(), "out": out })
        }
        Command::OracleCheck { data, tol } => {
            let r = cmd_oracle_check(&data, tol)?;
            json!({ "checked": r.checked, "max_deviation": r.max_deviation })
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PROPSCALE_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
