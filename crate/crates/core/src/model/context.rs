use std::collections::BTreeMap;

use crate::datapipe::Dataset;
use crate::simkit::ItemId;

use super::spatial::DayHyperedges;
use super::ModelError;

/// Per-day hypergraph in both directions, over the dataset's global
/// promoter rows and item columns.
#[derive(Clone, Debug)]
pub struct GraphContext {
    pub n_promoters: usize,
    pub n_items: usize,
    item_cols: BTreeMap<ItemId, usize>,
    days: Vec<DayIncidence>,
    hyperedges: Vec<DayHyperedges>,
}

#[derive(Clone, Debug)]
struct DayIncidence {
    /// Item column → ascending promoter rows.
    columns: Vec<Vec<u32>>,
    /// Promoter row → item columns, CSR.
    row_offsets: Vec<u32>,
    row_items: Vec<u32>,
}

impl GraphContext {
    pub fn from_dataset(ds: &Dataset) -> Result<Self, ModelError> {
        let mut ctx = Self::from_columns(
            ds.index.promoters.len(),
            ds.index.items.len(),
            ds.incidence.iter().map(|b| b.columns.clone()),
        )?;
        ctx.item_cols = ds.index.items.iter().enumerate().map(|(c, &i)| (i, c)).collect();
        Ok(ctx)
    }

    /// `days` yields, per day, each item column's promoter rows. Item `ItemId(c)`
    /// is taken to own column `c`.
    pub fn from_columns(
        n_promoters: usize,
        n_items: usize,
        days: impl IntoIterator<Item = Vec<Vec<u32>>>,
    ) -> Result<Self, ModelError> {
        let days: Vec<DayIncidence> = days
            .into_iter()
            .map(|columns| {
                if columns.len() != n_items || columns.iter().flatten().any(|&m| m as usize >= n_promoters) {
                    return Err(ModelError::Shape(format!(
                        "incidence does not fit {n_promoters} promoters and {n_items} items"
                    )));
                }
                let mut counts = vec![0u32; n_promoters + 1];
                for col in &columns {
                    for &m in col {
                        counts[m as usize + 1] += 1;
                    }
                }
                for r in 0..n_promoters {
                    counts[r + 1] += counts[r];
                }
                let mut fill = counts.clone();
                let mut row_items = vec![0u32; counts[n_promoters] as usize];
                for (i, col) in columns.iter().enumerate() {
                    for &m in col {
                        row_items[fill[m as usize] as usize] = i as u32;
                        fill[m as usize] += 1;
                    }
                }
                Ok(DayIncidence { columns, row_offsets: counts, row_items })
            })
            .collect::<Result<_, _>>()?;
        let hyperedges =
            days.iter().map(|d| DayHyperedges::from_columns(n_promoters, &d.columns)).collect::<Result<_, _>>()?;
        let item_cols = (0..n_items).map(|c| (ItemId(c as u32), c)).collect();
        Ok(Self { n_promoters, n_items, item_cols, days, hyperedges })
    }

    /// The whole hypergraph of `day`.
    pub fn hyperedges(&self, day: usize) -> &DayHyperedges {
        &self.hyperedges[day]
    }

    pub fn item_col(&self, item: ItemId) -> Option<usize> {
        self.item_cols.get(&item).copied()
    }

    pub fn n_days(&self) -> usize {
        self.days.len()
    }

    /// Promoter rows of item column `item` on `day`.
    pub fn members(&self, day: usize, item: usize) -> &[u32] {
        &self.days[day].columns[item]
    }

    /// Item columns promoter row `row` participates in on `day`.
    pub fn items_of(&self, day: usize, row: usize) -> &[u32] {
        let d = &self.days[day];
        &d.row_items[d.row_offsets[row] as usize..d.row_offsets[row + 1] as usize]
    }
}
