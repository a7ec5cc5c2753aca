use std::collections::BTreeMap;

use crate::autodiff::Csr;
use crate::simkit::{ItemId, PromoterId, PromotionSnapshot};

/// Dense row/column numbering of every promoter and item in a trace.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GlobalIndex {
    pub promoters: Vec<PromoterId>,
    pub items: Vec<ItemId>,
    promoter_row: BTreeMap<PromoterId, usize>,
    item_col: BTreeMap<ItemId, usize>,
}

impl GlobalIndex {
    pub fn from_trace(trace: &[PromotionSnapshot]) -> Self {
        let mut promoters: Vec<PromoterId> = trace.iter().flat_map(|s| s.promoters.iter().copied()).collect();
        promoters.sort_unstable();
        promoters.dedup();
        let mut items: Vec<ItemId> = trace.iter().map(|s| s.item).collect();
        items.sort_unstable();
        items.dedup();
        let promoter_row = promoters.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        let item_col = items.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        Self { promoters, items, promoter_row, item_col }
    }

    pub fn row(&self, p: PromoterId) -> Option<usize> {
        self.promoter_row.get(&p).copied()
    }

    pub fn col(&self, i: ItemId) -> Option<usize> {
        self.item_col.get(&i).copied()
    }
}

/// Promoter × item participation on one day, stored by column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IncidenceMatrix {
    pub day: u32,
    pub n_promoters: usize,
    /// `columns[i]`: ascending promoter rows active for item column `i`.
    pub columns: Vec<Vec<u32>>,
}

impl IncidenceMatrix {
    pub fn n_items(&self) -> usize {
        self.columns.len()
    }

    pub fn get(&self, m: usize, i: usize) -> bool {
        self.columns[i].binary_search(&(m as u32)).is_ok()
    }

    /// Number of items each promoter participates in.
    pub fn row_sums(&self) -> Vec<usize> {
        let mut out = vec![0; self.n_promoters];
        for col in &self.columns {
            for &m in col {
                out[m as usize] += 1;
            }
        }
        out
    }

    pub fn nnz(&self) -> usize {
        self.columns.iter().map(Vec::len).sum()
    }

    /// `B` as a `|M| × |I|` sparse matrix of ones.
    pub fn to_csr(&self) -> Csr {
        let triplets: Vec<(usize, usize, f64)> = self
            .columns
            .iter()
            .enumerate()
            .flat_map(|(i, col)| col.iter().map(move |&m| (m as usize, i, 1.0)))
            .collect();
        Csr::from_triplets(self.n_promoters, self.n_items(), &triplets).expect("rows and columns are in range")
    }
}

/// `B[m, i] = 1` iff promoter `m` is active for item `i` on `day`.
pub fn build_incidence(trace: &[PromotionSnapshot], index: &GlobalIndex, day: u32) -> IncidenceMatrix {
    let mut columns = vec![Vec::new(); index.items.len()];
    for s in trace.iter().filter(|s| s.day == day) {
        let Some(c) = index.col(s.item) else { continue };
        let rows = &mut columns[c];
        rows.extend(s.promoters.iter().filter_map(|&p| index.row(p)).map(|r| r as u32));
        rows.sort_unstable();
        rows.dedup();
    }
    IncidenceMatrix { day, n_promoters: index.promoters.len(), columns }
}
