use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, LogNormal, Poisson};
use rayon::prelude::*;

use super::{derive_seed, topological_order, ItemId, OrderRecord, PromoterId, PromotionSnapshot, SimConfig, SimError};

const STREAM_ITEM: u64 = 1;
const STREAM_PROMOTER: u64 = 2;
const STREAM_ORDERS: u64 = 3;

/// Per-promoter traits shared by every item the promoter joins.
struct PromoterTraits {
    activity: f64,
    propensity: f64,
}

fn promoter_traits(cfg: &SimConfig, id: usize) -> PromoterTraits {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, &[STREAM_PROMOTER, id as u64]));
    let activity = rng.random_range(0.4..1.6);
    let propensity = LogNormal::new(0.0, 0.8).expect("valid lognormal").sample(&mut rng);
    PromoterTraits { activity, propensity }
}

fn order_value<R: Rng>(geom: &Geometric, rng: &mut R) -> f64 {
    1.0 + geom.sample(rng) as f64
}

fn generate_item(cfg: &SimConfig, item: usize) -> Vec<PromotionSnapshot> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, &[STREAM_ITEM, item as u64]));
    let (lo, hi) = cfg.promoters_per_item_range;
    let n = rng.random_range(lo..=hi);
    // Audience in rank order: retweets only run from lower to higher rank.
    let mut audience: Vec<usize> = rand::seq::index::sample(&mut rng, cfg.promoter_pool, n).into_vec();
    audience.shuffle(&mut rng);

    let mut latent = BTreeSet::new();
    while latent.len() < cfg.edge_budget {
        let dst = rng.random_range(1..n);
        let src = rng.random_range(0..dst);
        latent.insert((src, dst));
    }

    let traits: Vec<PromoterTraits> = audience.iter().map(|&p| promoter_traits(cfg, p)).collect();
    let affinity: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let geom = Geometric::new(1.0 / cfg.mean_sales).expect("mean_sales >= 1");

    let rho = cfg.activity_persistence;
    let mut member = vec![false; n];
    let mut active = vec![false; n];
    let mut out = Vec::with_capacity(cfg.n_days);
    for day in 0..cfg.n_days {
        let burst = rng.random_bool(cfg.burst_probability);
        let mult = if burst { cfg.burst_multiplier } else { 1.0 };
        for rank in 0..n {
            let scale = traits[rank].activity * affinity[rank] * mult;
            let fresh = if member[rank] {
                member[rank] = !rng.random_bool(cfg.churn_rate);
                false
            } else {
                member[rank] = rng.random_bool((cfg.join_rate * scale).min(1.0));
                true
            };
            if !member[rank] {
                active[rank] = false;
                continue;
            }
            let p = (cfg.base_activity * scale).min(1.0);
            let p = match (fresh, active[rank]) {
                (true, _) => p,
                (false, true) => rho + (1.0 - rho) * p,
                (false, false) => (1.0 - rho) * p,
            };
            active[rank] = rng.random_bool(p);
        }

        let mut self_sales = BTreeMap::new();
        for rank in (0..n).filter(|&r| member[r]) {
            let rate = cfg.order_rate * traits[rank].propensity * mult;
            let count = if active[rank] && rate > 0.0 {
                Poisson::new(rate).expect("positive rate").sample(&mut rng) as u64
            } else {
                0
            };
            let total: f64 = (0..count).map(|_| order_value(&geom, &mut rng)).sum();
            self_sales.insert(PromoterId(audience[rank] as u32), total);
        }

        let promoters: Vec<PromoterId> = self_sales.keys().copied().collect();
        let mut edges: Vec<(PromoterId, PromoterId)> = latent
            .iter()
            .filter(|&&(s, d)| member[s] && member[d])
            .map(|&(s, d)| (PromoterId(audience[s] as u32), PromoterId(audience[d] as u32)))
            .collect();
        edges.sort_unstable();
        out.push(PromotionSnapshot { item: ItemId(item as u32), day: day as u32, promoters, edges, self_sales });
    }
    out
}

/// Daily snapshots for every item, ordered by item then day.
///
/// Each item draws an audience from the shared pool and a latent rank-ordered
/// DAG of `edge_budget` retweet edges. Members join the item's network at
/// `join_rate` and leave at `churn_rate`; a day's snapshot holds the members
/// and the latent edges between them. Members sell on a given day with a
/// probability that carries over with `activity_persistence`; bursts scale both
/// joining and selling by `burst_multiplier`. A seller's self-sales are a sum
/// of `Poisson(order_rate · propensity · burst)` shifted-geometric order values.
pub fn generate_trace(cfg: &SimConfig) -> Result<Vec<PromotionSnapshot>, SimError> {
    cfg.validate()?;
    if cfg.n_days == 0 {
        return Ok(Vec::new());
    }
    let per_item: Vec<Vec<PromotionSnapshot>> =
        (0..cfg.n_items).into_par_iter().map(|i| generate_item(cfg, i)).collect();
    Ok(per_item.into_iter().flatten().collect())
}

/// Number of complete backward paths from each promoter to a source.
fn path_counts(snap: &PromotionSnapshot, parents: &BTreeMap<PromoterId, Vec<PromoterId>>) -> BTreeMap<PromoterId, f64> {
    let order = topological_order(snap).expect("snapshot is a DAG");
    let mut counts = BTreeMap::new();
    for p in order {
        let c = match parents.get(&p) {
            None => 1.0,
            Some(ps) => ps.iter().map(|q| counts[q]).sum(),
        };
        counts.insert(p, c);
    }
    counts
}

fn sample_chain<R: Rng>(
    originator: PromoterId,
    parents: &BTreeMap<PromoterId, Vec<PromoterId>>,
    counts: &BTreeMap<PromoterId, f64>,
    rng: &mut R,
) -> Vec<PromoterId> {
    let mut chain = vec![originator];
    let mut cur = originator;
    while let Some(ps) = parents.get(&cur) {
        // Choosing a parent in proportion to its own path count makes the
        // complete path uniform among all backward paths from the originator.
        let total: f64 = ps.iter().map(|p| counts[p]).sum();
        let mut u = rng.random_range(0.0..total);
        let mut next = *ps.last().expect("non-empty parents");
        for p in ps {
            u -= counts[p];
            if u < 0.0 {
                next = *p;
                break;
            }
        }
        chain.push(next);
        cur = next;
    }
    chain
}

/// Splits each promoter's self-sales into shifted-geometric orders and
/// attributes each order to a uniformly sampled backward path ending at a
/// source of the day's network.
pub fn generate_orders(trace: &[PromotionSnapshot], cfg: &SimConfig) -> Vec<OrderRecord> {
    if cfg.order_rate == 0.0 {
        return Vec::new();
    }
    let geom = Geometric::new(1.0 / cfg.mean_sales.max(1.0)).expect("valid geometric");
    let mut orders = Vec::new();
    let mut next_id = 0u64;
    for snap in trace {
        if snap.self_sales.values().all(|&v| v <= 0.0) {
            continue;
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, &[STREAM_ORDERS, snap.item.0 as u64, snap.day as u64]));
        let parents = snap.parents();
        let counts = path_counts(snap, &parents);
        for (&m, &total) in &snap.self_sales {
            let mut remaining = total;
            while remaining > 1e-9 {
                let sales = order_value(&geom, &mut rng).min(remaining);
                remaining -= sales;
                let chain = sample_chain(m, &parents, &counts, &mut rng);
                orders.push(OrderRecord { order_id: next_id, item: snap.item, day: snap.day, sales, chain });
                next_id += 1;
            }
        }
    }
    orders
}
