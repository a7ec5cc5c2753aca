//! Synthetic promotion networks, order logs with attribution chains, and the
//! exact ground-truth quantities derived from them.
//!
//! Every per-item random stream is seeded from `(rng_seed, item, purpose)`, so
//! generation is reproducible and may run item-parallel.

mod fixture;
mod generate;
pub mod io;
mod oracle;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use fixture::chain_fixture;
pub use generate::{generate_orders, generate_trace};
pub use oracle::{
    oracle_activation_ratio, oracle_consistency_check, oracle_propagation_scale, oracle_self_sales, ConsistencyReport,
    RatioMatrix,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromoterId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u32);

impl fmt::Display for PromoterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}", self.0)
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "i{}", self.0)
    }
}

/// One item's retweet graph and per-promoter self-sales for one day.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromotionSnapshot {
    pub item: ItemId,
    pub day: u32,
    /// Active promoters, ascending.
    pub promoters: Vec<PromoterId>,
    /// Retweet edges `(source, retweeter)`.
    pub edges: Vec<(PromoterId, PromoterId)>,
    pub self_sales: BTreeMap<PromoterId, f64>,
}

impl PromotionSnapshot {
    /// In-neighbours of every promoter that has at least one.
    pub fn parents(&self) -> BTreeMap<PromoterId, Vec<PromoterId>> {
        let mut out: BTreeMap<PromoterId, Vec<PromoterId>> = BTreeMap::new();
        for &(src, dst) in &self.edges {
            out.entry(dst).or_default().push(src);
        }
        out
    }

    pub fn children(&self) -> BTreeMap<PromoterId, Vec<PromoterId>> {
        let mut out: BTreeMap<PromoterId, Vec<PromoterId>> = BTreeMap::new();
        for &(src, dst) in &self.edges {
            out.entry(src).or_default().push(dst);
        }
        out
    }

    /// Checks endpoint membership, self-loops, sales keys and acyclicity.
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |reason: String| SimError::InvalidSnapshot { item: self.item, day: self.day, reason };
        let member = |p: &PromoterId| self.promoters.binary_search(p).is_ok();
        if self.promoters.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("promoters not strictly ascending".into()));
        }
        for (s, d) in &self.edges {
            if s == d {
                return Err(bad(format!("self-loop at {s}")));
            }
            if !member(s) || !member(d) {
                return Err(bad(format!("edge ({s},{d}) leaves the promoter set")));
            }
        }
        if let Some(k) = self.self_sales.keys().find(|k| !member(k)) {
            return Err(bad(format!("self-sales for inactive {k}")));
        }
        if self.self_sales.values().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(bad("negative or non-finite self-sales".into()));
        }
        if topological_order(self).is_none() {
            return Err(bad("edges contain a cycle".into()));
        }
        Ok(())
    }
}

/// Kahn ordering of the snapshot's promoters; `None` on a cycle.
pub(crate) fn topological_order(snap: &PromotionSnapshot) -> Option<Vec<PromoterId>> {
    let mut indeg: BTreeMap<PromoterId, usize> = snap.promoters.iter().map(|&p| (p, 0)).collect();
    for (_, d) in &snap.edges {
        *indeg.entry(*d).or_default() += 1;
    }
    let children = snap.children();
    let mut ready: Vec<PromoterId> = indeg.iter().filter(|(_, &n)| n == 0).map(|(&p, _)| p).collect();
    let mut order = Vec::with_capacity(indeg.len());
    while let Some(p) = ready.pop() {
        order.push(p);
        for c in children.get(&p).into_iter().flatten() {
            let n = indeg.get_mut(c).expect("child is a member");
            *n -= 1;
            if *n == 0 {
                ready.push(*c);
            }
        }
    }
    (order.len() == indeg.len()).then_some(order)
}

/// A customer order and the promoters it is attributed to, originator first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderRecord {
    pub order_id: u64,
    pub item: ItemId,
    pub day: u32,
    pub sales: f64,
    pub chain: Vec<PromoterId>,
}

impl OrderRecord {
    pub fn originator(&self) -> PromoterId {
        self.chain[0]
    }

    /// Checks the chain against the order's snapshot: every hop `(chain[k+1], chain[k])`
    /// is an edge and the last member has no in-edges.
    pub fn validate(&self, snap: &PromotionSnapshot) -> Result<(), SimError> {
        let bad = |reason: String| SimError::InvalidOrder { order_id: self.order_id, reason };
        if snap.item != self.item || snap.day != self.day {
            return Err(bad("snapshot does not match item/day".into()));
        }
        if self.chain.is_empty() {
            return Err(bad("empty chain".into()));
        }
        if !(self.sales.is_finite() && self.sales > 0.0) {
            return Err(bad(format!("non-positive sales {}", self.sales)));
        }
        if let Some(p) = self.chain.iter().find(|p| snap.promoters.binary_search(p).is_err()) {
            return Err(bad(format!("{p} inactive that day")));
        }
        for w in self.chain.windows(2) {
            if !snap.edges.contains(&(w[1], w[0])) {
                return Err(bad(format!("no edge ({},{})", w[1], w[0])));
            }
        }
        let last = *self.chain.last().expect("non-empty");
        if snap.edges.iter().any(|&(_, d)| d == last) {
            return Err(bad(format!("chain stops at {last}, which has a source")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_items: usize,
    pub n_days: usize,
    /// Size of the shared promoter population items draw their audiences from.
    pub promoter_pool: usize,
    /// Inclusive audience-size range per item.
    pub promoters_per_item_range: (usize, usize),
    /// Edges in each item's latent retweet network.
    pub edge_budget: usize,
    /// Daily probability that an audience member outside the item's network
    /// shares the link and joins, before trait and burst scaling.
    pub join_rate: f64,
    /// Daily probability that a member leaves the network.
    pub churn_rate: f64,
    /// Mean daily probability that a member sells, outside bursts.
    pub base_activity: f64,
    pub burst_probability: f64,
    pub burst_multiplier: f64,
    /// Day-to-day stickiness `ρ` of activity: an active promoter stays active
    /// with probability `ρ + (1 - ρ) p`, an inactive one turns active with
    /// `(1 - ρ) p`, which keeps the marginal rate `p`. Zero gives independent days.
    pub activity_persistence: f64,
    /// Expected orders per active promoter per day at unit propensity.
    pub order_rate: f64,
    /// Mean of the shifted-geometric order value.
    pub mean_sales: f64,
    pub rng_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_items: 100,
            n_days: 20,
            promoter_pool: 4000,
            promoters_per_item_range: (40, 200),
            edge_budget: 240,
            join_rate: 0.1,
            churn_rate: 0.05,
            base_activity: 0.25,
            burst_probability: 0.15,
            burst_multiplier: 3.0,
            activity_persistence: 0.6,
            order_rate: 0.6,
            mean_sales: 3.0,
            rng_seed: 7,
        }
    }
}

impl SimConfig {
    /// Largest edge count a DAG over `n` nodes can hold.
    pub fn dag_capacity(n: usize) -> usize {
        n * n.saturating_sub(1) / 2
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let invalid = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        let (lo, hi) = self.promoters_per_item_range;
        if self.n_items == 0 || self.promoter_pool == 0 || lo == 0 {
            return invalid("counts must be positive");
        }
        if lo > hi || hi > self.promoter_pool {
            return invalid("promoters_per_item_range must satisfy 0 < lo <= hi <= promoter_pool");
        }
        if !(0.0..=1.0).contains(&self.burst_probability) {
            return invalid("burst_probability must lie in [0, 1]");
        }
        if !(self.join_rate > 0.0 && self.join_rate <= 1.0) {
            return invalid("join_rate must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.churn_rate) {
            return invalid("churn_rate must lie in [0, 1)");
        }
        if !(self.base_activity > 0.0 && self.base_activity <= 1.0) {
            return invalid("base_activity must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.activity_persistence) {
            return invalid("activity_persistence must lie in [0, 1)");
        }
        if !(self.burst_multiplier >= 1.0) {
            return invalid("burst_multiplier must be at least 1");
        }
        if !(self.order_rate >= 0.0 && self.order_rate.is_finite()) {
            return invalid("order_rate must be non-negative");
        }
        if !(self.mean_sales >= 1.0) {
            return invalid("mean_sales must be at least 1");
        }
        let capacity = Self::dag_capacity(lo);
        if self.edge_budget > capacity {
            return Err(SimError::EdgeBudget { budget: self.edge_budget, capacity });
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("edge budget {budget} exceeds DAG capacity {capacity} of the smallest audience")]
    EdgeBudget { budget: usize, capacity: usize },
    #[error("snapshot {item}/day {day}: {reason}")]
    InvalidSnapshot { item: ItemId, day: u32, reason: String },
    #[error("order {order_id}: {reason}")]
    InvalidOrder { order_id: u64, reason: String },
    #[error("order {order_id} has no snapshot")]
    OrphanOrder { order_id: u64 },
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Orders grouped by `(item, day)`.
pub fn group_orders(orders: &[OrderRecord]) -> BTreeMap<(ItemId, u32), Vec<OrderRecord>> {
    let mut out: BTreeMap<(ItemId, u32), Vec<OrderRecord>> = BTreeMap::new();
    for o in orders {
        out.entry((o.item, o.day)).or_default().push(o.clone());
    }
    out
}

/// Validates every snapshot and every order against its snapshot.
pub fn validate_log(trace: &[PromotionSnapshot], orders: &[OrderRecord]) -> Result<(), SimError> {
    let index: BTreeMap<(ItemId, u32), &PromotionSnapshot> = trace.iter().map(|s| ((s.item, s.day), s)).collect();
    for s in trace {
        s.validate()?;
    }
    for o in orders {
        let snap = index.get(&(o.item, o.day)).ok_or(SimError::OrphanOrder { order_id: o.order_id })?;
        o.validate(snap)?;
    }
    Ok(())
}

pub(crate) fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    // splitmix64 over the mixed words
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p.wrapping_mul(0xD1B5_4A32_D192_ED03));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        SimConfig::default().validate().unwrap();
    }

    #[test]
    fn edge_budget_over_capacity_is_rejected() {
        let cfg = SimConfig { promoters_per_item_range: (4, 10), edge_budget: 7, ..SimConfig::default() };
        assert!(matches!(cfg.validate(), Err(SimError::EdgeBudget { budget: 7, capacity: 6 })));
    }

    #[test]
    fn burst_probability_range() {
        let cfg = SimConfig { burst_probability: 1.5, ..SimConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn membership_rates_are_checked() {
        assert!(SimConfig { join_rate: 0.0, ..SimConfig::default() }.validate().is_err());
        assert!(SimConfig { churn_rate: 1.0, ..SimConfig::default() }.validate().is_err());
    }

    #[test]
    fn persistence_range() {
        let cfg = SimConfig { activity_persistence: 1.0, ..SimConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn cycle_is_detected() {
        let mut snap = chain_fixture().0.remove(0);
        snap.edges.push((PromoterId(4), PromoterId(1)));
        assert!(matches!(snap.validate(), Err(SimError::InvalidSnapshot { .. })));
    }

    #[test]
    fn fixture_orders_validate() {
        let (trace, orders) = chain_fixture();
        validate_log(&trace, &orders).unwrap();
    }

    #[test]
    fn chain_must_follow_edges() {
        let (trace, mut orders) = chain_fixture();
        orders[1].chain = vec![PromoterId(3), PromoterId(2), PromoterId(1)];
        assert!(validate_log(&trace, &orders).is_err());
    }
}
