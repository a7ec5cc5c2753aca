use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::datapipe::{Dataset, Split, TrainingExample};
use crate::model::{mape, msle, GraphContext, Mode, Model, Prediction};

use super::HarnessError;

/// One `(example, promoter, horizon step)` entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub item: u32,
    pub start: usize,
    pub promoter: u32,
    pub step: usize,
    pub target: f64,
    pub prediction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemMetrics {
    pub item: u32,
    pub msle: f64,
    /// Percent, over positive targets only.
    pub mape: Option<f64>,
    pub entries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: String,
    pub msle: f64,
    /// Percent, over positive targets only; `None` when every target is zero.
    pub mape: Option<f64>,
    pub entries: usize,
    pub positive_entries: usize,
    pub examples: usize,
    pub per_item: Vec<ItemMetrics>,
}

/// Rows the activation filter removed and whether they stayed exactly zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterAudit {
    pub rows: usize,
    pub filtered_rows: usize,
    /// Filtered rows with a non-zero coefficient or prediction bit pattern.
    pub violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `p2p+gcn`, `s2p-gcn`, ..., or `persistence`.
    pub model: String,
    pub mode: Mode,
    pub splits: Vec<SplitMetrics>,
    pub filter: Option<FilterAudit>,
    pub runtime_seconds: f64,
    pub config_hash: String,
}

impl MetricsReport {
    pub fn split(&self, split: Split) -> Option<&SplitMetrics> {
        self.splits.iter().find(|s| s.split == split.name())
    }

    pub fn write(&self, path: &Path) -> Result<(), HarnessError> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, HarnessError> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

fn target(mode: Mode, ex: &TrainingExample) -> &Tensor {
    match mode {
        Mode::S2S => &ex.x_true,
        Mode::P2P | Mode::S2P => &ex.y,
    }
}

fn rows_of(ex: &TrainingExample, truth: &Tensor, pred: &Tensor) -> Vec<PredictionRow> {
    let members = &ex.series.subtable.members;
    let mut out = Vec::with_capacity(truth.len());
    for m in 0..truth.rows() {
        for t in 0..truth.cols() {
            out.push(PredictionRow {
                item: ex.item.0,
                start: ex.start,
                promoter: members[m].0,
                step: t,
                target: truth.get(m, t),
                prediction: pred.get(m, t),
            });
        }
    }
    out
}

fn audit(p: &Prediction, audit: &mut FilterAudit) {
    for (t, (kept, s)) in p.kept.iter().zip(&p.filtered).enumerate() {
        audit.rows += kept.len();
        for (m, &k) in kept.iter().enumerate() {
            if k {
                continue;
            }
            audit.filtered_rows += 1;
            if s.row(m).iter().any(|v| v.to_bits() != 0) || p.output.get(m, t).to_bits() != 0 {
                audit.violations += 1;
            }
        }
    }
}

/// Examples sharing one evaluation tape.
const EVAL_CHUNK: usize = 32;

fn predict_all(
    model: &Model,
    examples: &[&TrainingExample],
    ctx: &GraphContext,
) -> Result<Vec<Prediction>, HarnessError> {
    let chunks: Vec<Vec<Prediction>> = examples
        .par_chunks(EVAL_CHUNK)
        .map(|c| model.predict_batch(c, ctx).map_err(HarnessError::from))
        .collect::<Result<_, _>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// MSLE of the mode's target over every entry of `examples`.
pub(crate) fn split_msle(
    model: &Model,
    examples: &[&TrainingExample],
    ctx: &GraphContext,
) -> Result<f64, HarnessError> {
    let preds = predict_all(model, examples, ctx)?;
    let (mut y, mut p) = (Vec::new(), Vec::new());
    for (ex, pr) in examples.iter().zip(&preds) {
        y.extend_from_slice(target(model.variant.mode, ex).data());
        p.extend_from_slice(pr.output.data());
    }
    Ok(msle(&y, &p)?)
}

/// Pooled and per-item metrics of prediction rows.
pub fn evaluate_predictions(split: &str, rows: &[PredictionRow]) -> Result<SplitMetrics, HarnessError> {
    let pct = |v: Option<f64>| v.map(|x| x * 100.0);
    let (y, p): (Vec<f64>, Vec<f64>) = rows.iter().map(|r| (r.target, r.prediction)).unzip();
    if y.is_empty() {
        return Err(HarnessError::EmptySplit(match split {
            "train" => "train",
            "val" => "val",
            "test" => "test",
            _ => "unknown",
        }));
    }
    let mut by_item: BTreeMap<u32, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let e = by_item.entry(r.item).or_default();
        e.0.push(r.target);
        e.1.push(r.prediction);
    }
    let per_item = by_item
        .into_iter()
        .map(|(item, (y, p))| Ok(ItemMetrics { item, msle: msle(&y, &p)?, mape: pct(mape(&y, &p)), entries: y.len() }))
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let mut examples: Vec<(u32, usize)> = rows.iter().map(|r| (r.item, r.start)).collect();
    examples.dedup();
    Ok(SplitMetrics {
        split: split.to_string(),
        msle: msle(&y, &p)?,
        mape: pct(mape(&y, &p)),
        entries: y.len(),
        positive_entries: y.iter().filter(|&&v| v > 0.0).count(),
        examples: examples.len(),
        per_item,
    })
}

/// Evaluation-mode predictions of the model on `split`, one row per entry.
pub fn predictions(
    model: &Model,
    ds: &Dataset,
    ctx: &GraphContext,
    split: Split,
) -> Result<(Vec<PredictionRow>, Option<FilterAudit>), HarnessError> {
    let examples = ds.examples(split);
    let preds = predict_all(model, &examples, ctx)?;
    let mut rows = Vec::new();
    let mut filter = (model.variant.mode == Mode::S2P).then(FilterAudit::default);
    for (ex, p) in examples.iter().zip(&preds) {
        rows.extend(rows_of(ex, target(model.variant.mode, ex), &p.output));
        if let Some(a) = filter.as_mut() {
            audit(p, a);
        }
    }
    Ok((rows, filter))
}

fn label(model: &Model) -> String {
    format!("{}{}", model.variant.mode, if model.variant.gcn { "+gcn" } else { "-gcn" })
}

/// Metrics of `model` on each of `splits`; the model is only read.
pub fn evaluate(
    model: &Model,
    ds: &Dataset,
    ctx: &GraphContext,
    splits: &[Split],
    config_hash: &str,
) -> Result<MetricsReport, HarnessError> {
    let t0 = Instant::now();
    let mut out = Vec::new();
    let mut filter: Option<FilterAudit> = None;
    for &split in splits {
        let (rows, audit) = predictions(model, ds, ctx, split)?;
        if rows.is_empty() {
            return Err(HarnessError::EmptySplit(split.name()));
        }
        out.push(evaluate_predictions(split.name(), &rows)?);
        if let Some(a) = audit {
            let f = filter.get_or_insert_with(FilterAudit::default);
            f.rows += a.rows;
            f.filtered_rows += a.filtered_rows;
            f.violations += a.violations;
        }
    }
    Ok(MetricsReport {
        model: label(model),
        mode: model.variant.mode,
        splits: out,
        filter,
        runtime_seconds: t0.elapsed().as_secs_f64(),
        config_hash: config_hash.to_string(),
    })
}

/// Last observed propagation scale carried forward: `ŷ^{T+t} = y^T`.
pub fn baseline_persistence(ds: &Dataset, splits: &[Split], config_hash: &str) -> Result<MetricsReport, HarnessError> {
    let t0 = Instant::now();
    let mut out = Vec::new();
    for &split in splits {
        let mut rows = Vec::new();
        for ex in ds.examples(split) {
            let last = ex.y_hist.column(ex.window - 1);
            let mut pred = Tensor::zeros(ex.y.shape());
            for (m, &v) in last.iter().enumerate() {
                for t in 0..ex.horizon {
                    pred.set(m, t, v);
                }
            }
            rows.extend(rows_of(ex, &ex.y, &pred));
        }
        if rows.is_empty() {
            return Err(HarnessError::EmptySplit(split.name()));
        }
        out.push(evaluate_predictions(split.name(), &rows)?);
    }
    Ok(MetricsReport {
        model: "persistence".into(),
        mode: Mode::P2P,
        splits: out,
        filter: None,
        runtime_seconds: t0.elapsed().as_secs_f64(),
        config_hash: config_hash.to_string(),
    })
}

/// `item,start,promoter,step,target,prediction` with values in shortest
/// round-trip form.
pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<(), HarnessError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "item,start,promoter,step,target,prediction")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{:?},{:?}", r.item, r.start, r.promoter, r.step, r.target, r.prediction)?;
    }
    w.flush()?;
    Ok(())
}
