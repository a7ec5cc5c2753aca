use serde::{Deserialize, Serialize};

use crate::datapipe::{Dataset, Split};
use crate::model::{GraphContext, Mode, Model};
use crate::simkit::{generate_orders, generate_trace};

use super::metrics::{baseline_persistence, evaluate, FilterAudit, MetricsReport};
use super::train::{train, TrainOutcome};
use super::{HarnessError, RunConfig};

/// Parameter name prefixes that belong to the graph encoders.
pub const SPATIAL_PREFIXES: [&str; 3] = ["local.", "global.", "embed.item"];

/// Simulates the configured benchmark and builds its dataset.
pub fn build_benchmark(cfg: &RunConfig) -> Result<Dataset, HarnessError> {
    let trace = generate_trace(&cfg.sim)?;
    let orders = generate_orders(&trace, &cfg.sim);
    Ok(Dataset::build(trace, orders, &cfg.data)?)
}

fn eval_splits(ds: &Dataset) -> Vec<Split> {
    Split::ALL.into_iter().filter(|&s| !ds.examples(s).is_empty()).collect()
}

#[derive(Clone, Debug)]
pub struct ModeRun {
    pub outcome: TrainOutcome,
    pub report: MetricsReport,
}

/// Trains `mode` (with `cfg.train.gcn_enabled`) and reports every non-empty split.
pub fn run_mode(mode: Mode, ds: &Dataset, ctx: &GraphContext, cfg: &RunConfig) -> Result<ModeRun, HarnessError> {
    let mut cfg = cfg.clone();
    cfg.train.mode = mode;
    cfg.validate()?;
    let outcome = train(ds, ctx, &cfg.model, &cfg.train)?;
    let report = evaluate(&outcome.model, ds, ctx, &eval_splits(ds), &cfg.hash())?;
    Ok(ModeRun { outcome, report })
}

fn spatial_params(model: &Model) -> usize {
    model.params.iter().filter(|(n, _)| SPATIAL_PREFIXES.iter().any(|p| n.starts_with(p))).map(|(_, t)| t.len()).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: Mode,
    pub gcn: bool,
    pub test_msle: f64,
    pub test_mape: Option<f64>,
    pub val_msle: Option<f64>,
    pub params: usize,
    pub spatial_params: usize,
    pub best_epoch: usize,
    pub seconds: f64,
    /// Activation-filter audit of the two-stage modes.
    #[serde(default)]
    pub filter: Option<FilterAudit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub config_hash: String,
    pub persistence_test_msle: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, mode: Mode, gcn: bool) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode && r.gcn == gcn)
    }

    /// Modes down, `±GCN` across, test MSLE in each cell.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| mode | +GCN | -GCN |\n|---|---|---|\n");
        for mode in Mode::ALL {
            let cell = |gcn| self.get(mode, gcn).map(|r| format!("{:.4}", r.test_msle)).unwrap_or_else(|| "-".into());
            s.push_str(&format!("| {mode} | {} | {} |\n", cell(true), cell(false)));
        }
        s.push_str(&format!("| persistence | {:.4} | |\n", self.persistence_test_msle));
        s
    }
}

/// All six `{P→P, S→S, S⇢P} × {±GCN}` runs on one dataset with shared seeds.
pub fn run_ablation(ds: &Dataset, ctx: &GraphContext, cfg: &RunConfig) -> Result<AblationTable, HarnessError> {
    run_variants(ds, ctx, cfg, &Mode::ALL, &[true, false])
}

/// The ablation restricted to the given modes and GCN settings.
pub fn run_variants(
    ds: &Dataset,
    ctx: &GraphContext,
    cfg: &RunConfig,
    modes: &[Mode],
    gcn: &[bool],
) -> Result<AblationTable, HarnessError> {
    let hash = cfg.hash();
    let persistence = baseline_persistence(ds, &[Split::Test], &hash)?;
    let mut rows = Vec::new();
    for &mode in modes {
        for &g in gcn {
            let mut c = cfg.clone();
            c.train.gcn_enabled = g;
            let run = run_mode(mode, ds, ctx, &c)?;
            let test = run.report.split(Split::Test).ok_or(HarnessError::EmptySplit("test"))?;
            log::info!("{mode}{} test msle {:.4}", if g { "+gcn" } else { "-gcn" }, test.msle);
            rows.push(AblationRow {
                mode,
                gcn: g,
                test_msle: test.msle,
                test_mape: test.mape,
                val_msle: run.report.split(Split::Val).map(|s| s.msle),
                params: run.outcome.model.params.numel(),
                spatial_params: spatial_params(&run.outcome.model),
                best_epoch: run.outcome.best_epoch,
                seconds: run.outcome.seconds,
                filter: run.report.filter.clone(),
            });
        }
    }
    let persistence_test_msle = persistence.split(Split::Test).map(|s| s.msle).unwrap_or(f64::NAN);
    Ok(AblationTable { config_hash: hash, persistence_test_msle, rows })
}
