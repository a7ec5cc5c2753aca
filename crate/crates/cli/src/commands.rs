use std::path::{Path, PathBuf};

use propscale::datapipe::{load_dataset, save_dataset, Dataset, Split};
use propscale::harness::{
    config_hash, evaluate, predictions, run_ablation, train, write_history, write_predictions, AblationTable,
    MetricsReport, RunConfig, StopReason,
};
use propscale::model::{GraphContext, Model};
use propscale::simkit::{
    generate_orders, generate_trace, io, oracle_consistency_check, validate_log, ConsistencyReport,
};

use crate::config::write_resolved;
use crate::error::{CliError, ErrorClass};

pub const CHECKPOINT: &str = "model.ckpt";
pub const REPORT: &str = "report.json";
pub const HISTORY: &str = "history.csv";
pub const TRACE: &str = "trace.jsonl";
pub const ORDERS: &str = "orders.jsonl";

fn require_file(path: &Path) -> Result<PathBuf, CliError> {
    if path.is_file() {
        Ok(path.to_path_buf())
    } else {
        Err(CliError::new(ErrorClass::MissingFile, format!("{} not found", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimSummary {
    pub snapshots: usize,
    pub orders: usize,
}

/// Writes `trace.jsonl` and `orders.jsonl` under `out`.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<SimSummary, CliError> {
    let trace = generate_trace(&cfg.sim)?;
    let orders = generate_orders(&trace, &cfg.sim);
    validate_log(&trace, &orders)?;
    std::fs::create_dir_all(out)?;
    io::write_trace(&out.join(TRACE), &trace)?;
    io::write_orders(&out.join(ORDERS), &orders)?;
    write_resolved(cfg, out)?;
    log::info!("simulated {} snapshots and {} orders into {}", trace.len(), orders.len(), out.display());
    Ok(SimSummary { snapshots: trace.len(), orders: orders.len() })
}

/// Builds window examples, splits and the manifest from the logs in `data_dir`
/// using `cfg.data`, and stores the dataset under `out`.
pub fn cmd_prepare(data_dir: &Path, cfg: &RunConfig, out: &Path) -> Result<Dataset, CliError> {
    let trace = io::read_trace(&require_file(&data_dir.join(TRACE))?)?;
    let orders = io::read_orders(&require_file(&data_dir.join(ORDERS))?)?;
    validate_log(&trace, &orders)?;
    let ds = Dataset::build(trace, orders, &cfg.data)?;
    save_dataset(&ds, out)?;
    write_resolved(cfg, out)?;
    log::info!(
        "prepared {} train / {} val / {} test items",
        ds.items(Split::Train).len(),
        ds.items(Split::Val).len(),
        ds.items(Split::Test).len()
    );
    Ok(ds)
}

/// The dataset's own window, horizon and split settings replace those of `cfg`.
pub fn align_with_dataset(cfg: &RunConfig, ds: &Dataset) -> RunConfig {
    let mut cfg = cfg.clone();
    cfg.data = ds.manifest.config();
    cfg.model.window = ds.window();
    cfg.model.horizon = ds.horizon();
    cfg
}

fn non_empty_splits(ds: &Dataset) -> Vec<Split> {
    Split::ALL.into_iter().filter(|&s| !ds.examples(s).is_empty()).collect()
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub report: MetricsReport,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stop: StopReason,
}

/// Trains on the prepared dataset in `data_dir`; writes the best checkpoint,
/// `history.csv`, `report.json` over every split, test predictions and the
/// resolved config to `out`.
pub fn cmd_train(data_dir: &Path, cfg: &RunConfig, out: &Path) -> Result<TrainSummary, CliError> {
    let ds = load_dataset(data_dir)?;
    let cfg = align_with_dataset(cfg, &ds);
    cfg.validate()?;
    let ctx = GraphContext::from_dataset(&ds)?;
    std::fs::create_dir_all(out)?;
    write_resolved(&cfg, out)?;
    let outcome = train(&ds, &ctx, &cfg.model, &cfg.train)?;
    outcome.model.save(&out.join(CHECKPOINT))?;
    write_history(&out.join(HISTORY), &outcome.history)?;
    let report = evaluate(&outcome.model, &ds, &ctx, &non_empty_splits(&ds), &cfg.hash())?;
    report.write(&out.join(REPORT))?;
    if !ds.examples(Split::Test).is_empty() {
        let (rows, _) = predictions(&outcome.model, &ds, &ctx, Split::Test)?;
        write_predictions(&out.join("predictions_test.csv"), &rows)?;
    }
    Ok(TrainSummary { report, best_epoch: outcome.best_epoch, epochs_run: outcome.history.len(), stop: outcome.stop })
}

/// Scores a checkpoint on one split (or every non-empty split) and writes
/// `report.json` plus per-split prediction files to `out`.
pub fn cmd_evaluate(
    checkpoint: &Path,
    data_dir: &Path,
    split: Option<Split>,
    out: &Path,
) -> Result<MetricsReport, CliError> {
    let model = Model::load(&require_file(checkpoint)?)?;
    let ds = load_dataset(data_dir)?;
    if model.cfg.window != ds.window() || model.cfg.horizon != ds.horizon() {
        return Err(CliError::new(
            ErrorClass::Schema,
            format!(
                "checkpoint expects window/horizon {}/{}, dataset has {}/{}",
                model.cfg.window,
                model.cfg.horizon,
                ds.window(),
                ds.horizon()
            ),
        ));
    }
    let ctx = GraphContext::from_dataset(&ds)?;
    if model.n_promoters() != ctx.n_promoters {
        return Err(CliError::new(
            ErrorClass::Schema,
            format!("checkpoint covers {} promoters, dataset has {}", model.n_promoters(), ctx.n_promoters),
        ));
    }
    let splits = match split {
        Some(s) => vec![s],
        None => non_empty_splits(&ds),
    };
    std::fs::create_dir_all(out)?;
    let report = evaluate(&model, &ds, &ctx, &splits, &config_hash(&model.cfg))?;
    report.write(&out.join(REPORT))?;
    for s in splits {
        let (rows, _) = predictions(&model, &ds, &ctx, s)?;
        write_predictions(&out.join(format!("predictions_{}.csv", s.name())), &rows)?;
    }
    Ok(report)
}

/// All mode × GCN runs with shared seeds; writes `ablation.json`,
/// `ablation.md` and the resolved config.
pub fn cmd_ablate(data_dir: &Path, cfg: &RunConfig, out: &Path) -> Result<AblationTable, CliError> {
    let ds = load_dataset(data_dir)?;
    let cfg = align_with_dataset(cfg, &ds);
    cfg.validate()?;
    let ctx = GraphContext::from_dataset(&ds)?;
    std::fs::create_dir_all(out)?;
    write_resolved(&cfg, out)?;
    let table = run_ablation(&ds, &ctx, &cfg)?;
    std::fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&table)? + "\n")?;
    std::fs::write(out.join("ablation.md"), table.to_markdown())?;
    Ok(table)
}

/// Checks the propagation identity on every snapshot of the logs in `data_dir`.
pub fn cmd_oracle_check(data_dir: &Path, tol: f64) -> Result<ConsistencyReport, CliError> {
    let trace = io::read_trace(&require_file(&data_dir.join(TRACE))?)?;
    let orders = io::read_orders(&require_file(&data_dir.join(ORDERS))?)?;
    validate_log(&trace, &orders)?;
    let report = oracle_consistency_check(&trace, &orders, tol);
    match report.first_violation {
        None => Ok(report),
        Some((item, day, m)) => Err(CliError::new(
            ErrorClass::OracleViolation,
            format!(
                "identity fails at item {} day {day} promoter {} (max deviation {:e})",
                item.0, m.0, report.max_deviation
            ),
        )),
    }
}
