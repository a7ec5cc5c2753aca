use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::simkit::{ItemId, OrderRecord, PromotionSnapshot};

use super::examples::{build_series, series_examples, ItemSeries, TrainingExample};
use super::incidence::{build_incidence, GlobalIndex, IncidenceMatrix};
use super::split::{split_items, Split, Splits};
use super::subtable::build_subtable;
use super::DataError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Input days `T`.
    pub window: usize,
    /// Forecast days `Δt`.
    pub horizon: usize,
    pub split_seed: u64,
    pub ratios: [f64; 3],
    /// Largest sub-table; bigger ones keep their most active members.
    pub subtable_cap: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { window: 7, horizon: 1, split_seed: 0, ratios: [0.6, 0.1, 0.3], subtable_cap: Some(512) }
    }
}

impl DatasetConfig {
    pub fn validate(&self, n_days: usize) -> Result<(), DataError> {
        if self.window == 0 || self.horizon == 0 {
            return Err(DataError::InvalidConfig("window and horizon must be positive".into()));
        }
        if n_days < self.window + self.horizon {
            return Err(DataError::InvalidConfig(format!(
                "trace has {n_days} days, fewer than window {} + horizon {}",
                self.window, self.horizon
            )));
        }
        if self.subtable_cap == Some(0) {
            return Err(DataError::InvalidConfig("subtable_cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub window: usize,
    pub horizon: usize,
    pub split_seed: u64,
    pub ratios: [f64; 3],
    pub subtable_cap: Option<usize>,
    pub n_days: usize,
    pub splits: Splits,
    /// Items with no active promoter in the trace.
    pub skipped_items: Vec<ItemId>,
}

impl Manifest {
    pub fn config(&self) -> DatasetConfig {
        DatasetConfig {
            window: self.window,
            horizon: self.horizon,
            split_seed: self.split_seed,
            ratios: self.ratios,
            subtable_cap: self.subtable_cap,
        }
    }
}

/// A prepared dataset: the raw logs, global hypergraph inputs, and the
/// per-item series with their window examples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub trace: Vec<PromotionSnapshot>,
    pub orders: Vec<OrderRecord>,
    pub index: GlobalIndex,
    /// One matrix per trace day.
    pub incidence: Vec<IncidenceMatrix>,
    pub series: BTreeMap<ItemId, Arc<ItemSeries>>,
    pub examples: BTreeMap<ItemId, Vec<TrainingExample>>,
}

pub(crate) fn trace_days(trace: &[PromotionSnapshot]) -> usize {
    trace.iter().map(|s| s.day as usize + 1).max().unwrap_or(0)
}

/// Series for every item with a non-empty sub-table, and the skipped items.
pub(crate) fn build_all_series(
    trace: &[PromotionSnapshot],
    orders: &[OrderRecord],
    cfg: &DatasetConfig,
) -> Result<(BTreeMap<ItemId, Arc<ItemSeries>>, Vec<ItemId>), DataError> {
    let n_days = trace_days(trace);
    cfg.validate(n_days)?;
    let index = GlobalIndex::from_trace(trace);
    let mut snaps: BTreeMap<ItemId, BTreeMap<u32, &PromotionSnapshot>> = BTreeMap::new();
    for s in trace {
        snaps.entry(s.item).or_default().insert(s.day, s);
    }
    let mut by_item: BTreeMap<ItemId, BTreeMap<u32, Vec<&OrderRecord>>> = BTreeMap::new();
    for o in orders {
        by_item.entry(o.item).or_default().entry(o.day).or_default().push(o);
    }
    let empty = BTreeMap::new();
    let items: Vec<ItemId> = snaps.keys().copied().collect();
    let built: Vec<Result<Option<ItemSeries>, DataError>> = items
        .par_iter()
        .map(|&item| {
            let table = build_subtable(trace, item, 0..n_days as u32, cfg.subtable_cap)?;
            if table.is_empty() {
                return Ok(None);
            }
            let rows = table.members.iter().map(|&p| index.row(p).expect("member is in the trace")).collect();
            build_series(table, rows, &snaps[&item], by_item.get(&item).unwrap_or(&empty), n_days).map(Some)
        })
        .collect();
    let mut series = BTreeMap::new();
    let mut skipped = Vec::new();
    for (item, r) in items.into_iter().zip(built) {
        match r? {
            Some(s) => {
                series.insert(item, Arc::new(s));
            }
            None => skipped.push(item),
        }
    }
    if !skipped.is_empty() {
        log::warn!("skipped {} item(s) with empty sub-tables", skipped.len());
    }
    Ok((series, skipped))
}

impl Dataset {
    pub fn build(
        trace: Vec<PromotionSnapshot>,
        orders: Vec<OrderRecord>,
        cfg: &DatasetConfig,
    ) -> Result<Self, DataError> {
        let (series, skipped_items) = build_all_series(&trace, &orders, cfg)?;
        let items: Vec<ItemId> = series.keys().copied().collect();
        let splits = split_items(&items, cfg.ratios, cfg.split_seed)?;
        let n_days = trace_days(&trace);
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            window: cfg.window,
            horizon: cfg.horizon,
            split_seed: cfg.split_seed,
            ratios: cfg.ratios,
            subtable_cap: cfg.subtable_cap,
            n_days,
            splits,
            skipped_items,
        };
        let examples = series.iter().map(|(&i, s)| (i, series_examples(s, cfg.window, cfg.horizon))).collect();
        Ok(Self::assemble(manifest, trace, orders, series, examples))
    }

    pub(crate) fn assemble(
        manifest: Manifest,
        trace: Vec<PromotionSnapshot>,
        orders: Vec<OrderRecord>,
        series: BTreeMap<ItemId, Arc<ItemSeries>>,
        examples: BTreeMap<ItemId, Vec<TrainingExample>>,
    ) -> Self {
        let index = GlobalIndex::from_trace(&trace);
        let incidence = (0..manifest.n_days as u32).map(|d| build_incidence(&trace, &index, d)).collect();
        Self { manifest, trace, orders, index, incidence, series, examples }
    }

    pub fn window(&self) -> usize {
        self.manifest.window
    }

    pub fn horizon(&self) -> usize {
        self.manifest.horizon
    }

    pub fn items(&self, split: Split) -> &[ItemId] {
        self.manifest.splits.get(split)
    }

    /// All window examples of the split's items, item-major then by start.
    pub fn examples(&self, split: Split) -> Vec<&TrainingExample> {
        self.items(split).iter().flat_map(|i| self.examples.get(i).into_iter().flatten()).collect()
    }

    /// Keeps only the given items, dropping the rest from every split.
    pub fn restrict(&mut self, keep: &[ItemId]) {
        let keep_set: std::collections::BTreeSet<ItemId> = keep.iter().copied().collect();
        for part in [&mut self.manifest.splits.train, &mut self.manifest.splits.val, &mut self.manifest.splits.test] {
            part.retain(|i| keep_set.contains(i));
        }
        self.series.retain(|i, _| keep_set.contains(i));
        self.examples.retain(|i, _| keep_set.contains(i));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simkit::{generate_orders, generate_trace, SimConfig};

    fn small() -> (Vec<PromotionSnapshot>, Vec<OrderRecord>) {
        let cfg = SimConfig {
            n_items: 6,
            n_days: 6,
            promoter_pool: 80,
            promoters_per_item_range: (8, 16),
            edge_budget: 14,
            ..SimConfig::default()
        };
        let trace = generate_trace(&cfg).unwrap();
        let orders = generate_orders(&trace, &cfg);
        (trace, orders)
    }

    #[test]
    fn build_covers_every_window() {
        let (trace, orders) = small();
        let cfg = DatasetConfig { window: 3, horizon: 2, ..Default::default() };
        let ds = Dataset::build(trace, orders, &cfg).unwrap();
        for ex in ds.examples.values() {
            assert_eq!(ex.len(), 2);
        }
        let total: usize = Split::ALL.iter().map(|&s| ds.examples(s).len()).sum();
        assert_eq!(total, ds.series.len() * 2);
        assert_eq!(ds.incidence.len(), 6);
    }

    #[test]
    fn active_labels_match_snapshots() {
        let (trace, orders) = small();
        let cfg = DatasetConfig { window: 2, horizon: 2, ..Default::default() };
        let ds = Dataset::build(trace.clone(), orders, &cfg).unwrap();
        for exs in ds.examples.values() {
            for ex in exs {
                for t in 0..2 {
                    let day = ex.label_day(t) as u32;
                    let snap = trace.iter().find(|s| s.item == ex.item && s.day == day).unwrap();
                    for (m, p) in ex.series.subtable.members.iter().enumerate() {
                        let on = snap.promoters.contains(p);
                        assert_eq!(ex.active.get(m, t) == 1.0, on);
                    }
                }
            }
        }
    }
}
