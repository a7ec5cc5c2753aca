use std::collections::BTreeMap;

use super::{ItemId, OrderRecord, PromoterId, PromotionSnapshot};

/// The four-promoter toy network: `m1 → m2 → m4` and `m1 → m3`, with one order
/// of value 2 originated by `m4` (via `m2`, `m1`) and one of value 4 originated
/// by `m3` (via `m1`). Item 0, day 0.
pub fn chain_fixture() -> (Vec<PromotionSnapshot>, Vec<OrderRecord>) {
    let m = PromoterId;
    let item = ItemId(0);
    let snapshot = PromotionSnapshot {
        item,
        day: 0,
        promoters: vec![m(1), m(2), m(3), m(4)],
        edges: vec![(m(1), m(2)), (m(2), m(4)), (m(1), m(3))],
        self_sales: BTreeMap::from([(m(1), 0.0), (m(2), 0.0), (m(3), 4.0), (m(4), 2.0)]),
    };
    let orders = vec![
        OrderRecord { order_id: 0, item, day: 0, sales: 2.0, chain: vec![m(4), m(2), m(1)] },
        OrderRecord { order_id: 1, item, day: 0, sales: 4.0, chain: vec![m(3), m(1)] },
    ];
    (vec![snapshot], orders)
}
