use std::collections::BTreeMap;

use crate::simkit::{ItemId, PromoterId, PromotionSnapshot};

use super::DataError;

/// Dense local coordinates for the promoters of one item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubTable {
    pub item: ItemId,
    /// Ascending; position is the local index.
    pub members: Vec<PromoterId>,
    local_index: BTreeMap<PromoterId, usize>,
}

impl SubTable {
    pub fn new(item: ItemId, mut members: Vec<PromoterId>) -> Self {
        members.sort_unstable();
        members.dedup();
        let local_index = members.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        Self { item, members, local_index }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn local(&self, p: PromoterId) -> Option<usize> {
        self.local_index.get(&p).copied()
    }

    pub fn member(&self, local: usize) -> PromoterId {
        self.members[local]
    }
}

/// Union of the item's active promoters over `days`. With `cap`, only the
/// `cap` most frequently active members are kept (ties to the lower id).
pub fn build_subtable(
    trace: &[PromotionSnapshot],
    item: ItemId,
    days: std::ops::Range<u32>,
    cap: Option<usize>,
) -> Result<SubTable, DataError> {
    let mut seen = false;
    let mut activity: BTreeMap<PromoterId, usize> = BTreeMap::new();
    for s in trace.iter().filter(|s| s.item == item) {
        seen = true;
        if days.contains(&s.day) {
            for &p in &s.promoters {
                *activity.entry(p).or_default() += 1;
            }
        }
    }
    if !seen {
        return Err(DataError::MissingItem(item));
    }
    let mut members: Vec<PromoterId> = activity.keys().copied().collect();
    if let Some(cap) = cap.filter(|&c| members.len() > c) {
        let mut ranked: Vec<(usize, PromoterId)> = activity.iter().map(|(&p, &n)| (n, p)).collect();
        ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        members = ranked.into_iter().take(cap).map(|(_, p)| p).collect();
    }
    Ok(SubTable::new(item, members))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simkit::chain_fixture;

    #[test]
    fn fixture_members() {
        let (trace, _) = chain_fixture();
        let t = build_subtable(&trace, ItemId(0), 0..1, None).unwrap();
        assert_eq!(t.members, (1..=4).map(PromoterId).collect::<Vec<_>>());
        assert_eq!(t.local(PromoterId(3)), Some(2));
        assert_eq!(t.member(0), PromoterId(1));
    }

    #[test]
    fn absent_item_errors() {
        let (trace, _) = chain_fixture();
        assert!(matches!(build_subtable(&trace, ItemId(5), 0..1, None), Err(DataError::MissingItem(ItemId(5)))));
    }

    #[test]
    fn repeated_days_are_idempotent() {
        let (mut trace, _) = chain_fixture();
        let mut second = trace[0].clone();
        second.day = 1;
        trace.push(second);
        let t = build_subtable(&trace, ItemId(0), 0..2, None).unwrap();
        assert_eq!(t.len(), 4);
    }

    #[test]
    fn cap_keeps_most_active() {
        let (mut trace, _) = chain_fixture();
        let mut second = trace[0].clone();
        second.day = 1;
        second.promoters = vec![PromoterId(3), PromoterId(4)];
        second.edges.clear();
        second.self_sales.clear();
        trace.push(second);
        let t = build_subtable(&trace, ItemId(0), 0..2, Some(2)).unwrap();
        assert_eq!(t.members, vec![PromoterId(3), PromoterId(4)]);
    }
}
