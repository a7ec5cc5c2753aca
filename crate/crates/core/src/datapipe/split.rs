use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::simkit::ItemId;

use super::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(DataError::InvalidConfig(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<ItemId>,
    pub val: Vec<ItemId>,
    pub test: Vec<ItemId>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[ItemId] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn of(&self, item: ItemId) -> Option<Split> {
        Split::ALL.into_iter().find(|&s| self.get(s).contains(&item))
    }
}

/// Largest-remainder allocation of `n` items to the ratios; every non-zero
/// ratio receives at least one item.
fn allocate(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, e) in sizes.iter_mut().zip(&exact) {
        *s = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            sizes[i] += 1;
            left -= 1;
        }
    }
    for i in 0..3 {
        if ratios[i] > 0.0 && sizes[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (sizes[j], std::cmp::Reverse(j))).expect("three splits");
            sizes[donor] -= 1;
            sizes[i] += 1;
        }
    }
    sizes
}

/// Shuffles items with `seed` and cuts them into train/val/test by `ratios`.
/// Each part is returned in ascending id order.
pub fn split_items(items: &[ItemId], ratios: [f64; 3], seed: u64) -> Result<Splits, DataError> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidConfig(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let needed = ratios.iter().filter(|&&r| r > 0.0).count();
    if items.len() < needed {
        return Err(DataError::TooFewItems { items: items.len(), splits: needed });
    }
    let mut shuffled = items.to_vec();
    shuffled.sort_unstable();
    shuffled.dedup();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let [a, b, _] = allocate(shuffled.len(), &ratios);
    let mut parts = [shuffled[..a].to_vec(), shuffled[a..a + b].to_vec(), shuffled[a + b..].to_vec()];
    for p in &mut parts {
        p.sort_unstable();
    }
    let [train, val, test] = parts;
    Ok(Splits { train, val, test })
}
