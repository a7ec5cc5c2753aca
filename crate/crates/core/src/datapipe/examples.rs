use std::collections::BTreeMap;
use std::sync::Arc;

use crate::autodiff::Tensor;
use crate::simkit::{oracle_propagation_scale, oracle_self_sales, ItemId, OrderRecord, PromoterId, PromotionSnapshot};

use super::graph::{dfs_descendants, DescendantSets};
use super::subtable::SubTable;
use super::DataError;

/// Values are stored on disk as `f32`; rounding at construction keeps built and
/// loaded datasets identical.
pub(crate) fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// One day of an item's network in sub-table coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct DayGraph {
    pub day: u32,
    pub active: Vec<bool>,
    /// `(source, retweeter)` in local indices.
    pub edges: Vec<(u32, u32)>,
    pub descendants: DescendantSets,
}

/// Every day of one item: graphs, the observed self-sales signal and the
/// per-day oracle labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemSeries {
    pub subtable: SubTable,
    /// Rows of the sub-table members in the dataset's global promoter index.
    pub global_rows: Vec<usize>,
    pub days: Vec<DayGraph>,
    /// `signal[day][m]`: trace self-sales, zero on inactive days.
    pub signal: Vec<Vec<f64>>,
    pub self_sales: Vec<Vec<f64>>,
    pub prop_scale: Vec<Vec<f64>>,
}

impl ItemSeries {
    pub fn item(&self) -> ItemId {
        self.subtable.item
    }

    pub fn len(&self) -> usize {
        self.subtable.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subtable.is_empty()
    }

    pub fn n_days(&self) -> usize {
        self.days.len()
    }
}

/// One window position of one item: `T` input days followed by `Δt` label days.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub item: ItemId,
    pub series: Arc<ItemSeries>,
    pub start: usize,
    pub window: usize,
    pub horizon: usize,
    /// `|M_i| × T` self-sales inputs.
    pub x: Tensor,
    /// `|M_i| × T` observed propagation scale, the input of the direct mode.
    pub y_hist: Tensor,
    /// `|M_i| × Δt` labels.
    pub y: Tensor,
    pub x_true: Tensor,
    pub active: Tensor,
    /// Per horizon step, the `(m, d)` pairs with `d ∈ D(m)`.
    pub s_true: Vec<Vec<(u32, u32)>>,
}

impl TrainingExample {
    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn input_days(&self) -> &[DayGraph] {
        &self.series.days[self.start..self.start + self.window]
    }

    /// Trace day of horizon step `t`.
    pub fn label_day(&self, t: usize) -> usize {
        self.start + self.window + t
    }

    pub fn s_true_dense(&self, t: usize) -> Tensor {
        let n = self.n();
        let mut s = Tensor::zeros(&[n, n]);
        for &(m, d) in &self.s_true[t] {
            s.set(m as usize, d as usize, 1.0);
        }
        s
    }
}

fn column_block(rows: &[Vec<f64>], days: std::ops::Range<usize>, n: usize) -> Tensor {
    let w = days.len();
    let mut t = Tensor::zeros(&[n, w]);
    for (c, d) in days.enumerate() {
        for (m, &v) in rows[d].iter().enumerate() {
            t.set(m, c, v);
        }
    }
    t
}

/// Every window position of a series.
pub fn series_examples(series: &Arc<ItemSeries>, window: usize, horizon: usize) -> Vec<TrainingExample> {
    let n = series.len();
    let span = window + horizon;
    if series.n_days() < span {
        return Vec::new();
    }
    (0..=series.n_days() - span)
        .map(|start| {
            let hist = start..start + window;
            let fut = start + window..start + span;
            let active_rows: Vec<Vec<f64>> = series.days[fut.clone()]
                .iter()
                .map(|g| g.active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect())
                .collect();
            TrainingExample {
                item: series.item(),
                series: Arc::clone(series),
                start,
                window,
                horizon,
                x: column_block(&series.signal, hist.clone(), n),
                y_hist: column_block(&series.prop_scale, hist, n),
                y: column_block(&series.prop_scale, fut.clone(), n),
                x_true: column_block(&series.self_sales, fut.clone(), n),
                active: column_block(&active_rows, 0..horizon, n),
                s_true: fut.map(|d| series.days[d].descendants.pairs().collect()).collect(),
            }
        })
        .collect()
}

fn day_graph(snap: Option<&PromotionSnapshot>, table: &SubTable, day: u32) -> Result<DayGraph, DataError> {
    let n = table.len();
    let Some(snap) = snap else {
        return Ok(DayGraph {
            day,
            active: vec![false; n],
            edges: Vec::new(),
            descendants: DescendantSets::from_lists(&vec![Vec::new(); n]),
        });
    };
    // Reachability runs on the whole snapshot so that paths through members
    // dropped by a sub-table cap still count.
    let pos: BTreeMap<PromoterId, usize> = snap.promoters.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    let mut full_edges = Vec::with_capacity(snap.edges.len());
    for (s, d) in &snap.edges {
        match (pos.get(s), pos.get(d)) {
            (Some(&a), Some(&b)) => full_edges.push((a, b)),
            _ => return Err(DataError::Graph(format!("{}/day {day}: edge endpoint outside promoters", snap.item))),
        }
    }
    let reach = dfs_descendants(snap.promoters.len(), &full_edges)
        .map_err(|e| DataError::Graph(format!("{}/day {day}: {e}", snap.item)))?;
    let mut lists = vec![Vec::new(); n];
    let mut active = vec![false; n];
    for (i, &p) in snap.promoters.iter().enumerate() {
        if let Some(m) = table.local(p) {
            active[m] = true;
            let mut ds: Vec<usize> = reach[i].iter().filter_map(|&j| table.local(snap.promoters[j])).collect();
            ds.sort_unstable();
            lists[m] = ds;
        }
    }
    let mut edges: Vec<(u32, u32)> =
        snap.edges.iter().filter_map(|&(s, d)| Some((table.local(s)? as u32, table.local(d)? as u32))).collect();
    edges.sort_unstable();
    Ok(DayGraph { day, active, edges, descendants: DescendantSets::from_lists(&lists) })
}

/// Builds the series of one item over days `0..n_days`. `snaps` are the item's
/// snapshots and `orders` its orders grouped by day.
pub(crate) fn build_series(
    table: SubTable,
    global_rows: Vec<usize>,
    snaps: &BTreeMap<u32, &PromotionSnapshot>,
    orders: &BTreeMap<u32, Vec<&OrderRecord>>,
    n_days: usize,
) -> Result<ItemSeries, DataError> {
    let n = table.len();
    let item = table.item;
    let mut days = Vec::with_capacity(n_days);
    let mut signal = Vec::with_capacity(n_days);
    let mut self_sales = Vec::with_capacity(n_days);
    let mut prop_scale = Vec::with_capacity(n_days);
    let none = Vec::new();
    for day in 0..n_days as u32 {
        let snap = snaps.get(&day).copied();
        days.push(day_graph(snap, &table, day)?);
        let mut sig = vec![0.0; n];
        if let Some(s) = snap {
            for (p, &v) in &s.self_sales {
                if let Some(m) = table.local(*p) {
                    sig[m] = quantize(v);
                }
            }
        }
        signal.push(sig);
        let day_orders = orders.get(&day).unwrap_or(&none);
        let x = oracle_self_sales(day_orders.iter().copied(), item, day, &table.members);
        let y = oracle_propagation_scale(day_orders.iter().copied(), item, day, &table.members);
        self_sales.push(table.members.iter().map(|p| quantize(x[p])).collect());
        prop_scale.push(table.members.iter().map(|p| quantize(y[p])).collect());
    }
    Ok(ItemSeries { subtable: table, global_rows, days, signal, self_sales, prop_scale })
}

/// Window examples for every item of the trace with sub-tables spanning the
/// whole trace. Items without any active promoter are skipped.
pub fn build_examples(
    trace: &[PromotionSnapshot],
    orders: &[OrderRecord],
    window: usize,
    horizon: usize,
) -> Result<Vec<TrainingExample>, DataError> {
    let cfg = super::DatasetConfig { window, horizon, subtable_cap: None, ..Default::default() };
    let (series, _) = super::dataset::build_all_series(trace, orders, &cfg)?;
    Ok(series.values().flat_map(|s| series_examples(s, window, horizon)).collect())
}
