//! Reachability over per-day retweet graphs.

use rand::Rng;

use super::DataError;

/// Descendant lists for every node in CSR layout; each list is sorted.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DescendantSets {
    offsets: Vec<u32>,
    targets: Vec<u32>,
}

impl DescendantSets {
    pub fn from_lists(lists: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut targets = Vec::new();
        offsets.push(0);
        for l in lists {
            targets.extend(l.iter().map(|&d| d as u32));
            offsets.push(targets.len() as u32);
        }
        Self { offsets, targets }
    }

    pub(crate) fn from_raw(offsets: Vec<u32>, targets: Vec<u32>) -> Result<Self, DataError> {
        let ok = offsets.first() == Some(&0)
            && offsets.windows(2).all(|w| w[0] <= w[1])
            && offsets.last().map(|&l| l as usize) == Some(targets.len());
        if !ok {
            return Err(DataError::Corrupt("descendant offsets are inconsistent".into()));
        }
        Ok(Self { offsets, targets })
    }

    pub fn raw(&self) -> (&[u32], &[u32]) {
        (&self.offsets, &self.targets)
    }

    /// Number of nodes covered.
    pub fn len(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, m: usize) -> &[u32] {
        &self.targets[self.offsets[m] as usize..self.offsets[m + 1] as usize]
    }

    /// Total `(root, descendant)` pairs.
    pub fn pair_count(&self) -> usize {
        self.targets.len()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        (0..self.len()).flat_map(move |m| self.get(m).iter().map(move |&d| (m as u32, d)))
    }
}

fn adjacency(n: usize, edges: &[(usize, usize)]) -> Result<Vec<Vec<usize>>, DataError> {
    let mut adj = vec![Vec::new(); n];
    for &(s, d) in edges {
        if s >= n || d >= n {
            return Err(DataError::Graph(format!("edge ({s},{d}) outside {n} nodes")));
        }
        adj[s].push(d);
    }
    Ok(adj)
}

/// Three-colour DFS; returns a node on a cycle if there is one.
fn find_cycle(adj: &[Vec<usize>]) -> Option<usize> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Open,
        Done,
    }
    let mut mark = vec![Mark::New; adj.len()];
    for root in 0..adj.len() {
        if mark[root] != Mark::New {
            continue;
        }
        let mut stack = vec![(root, 0usize)];
        mark[root] = Mark::Open;
        while let Some(&mut (v, ref mut next)) = stack.last_mut() {
            if let Some(&c) = adj[v].get(*next) {
                *next += 1;
                match mark[c] {
                    Mark::Open => return Some(c),
                    Mark::New => {
                        mark[c] = Mark::Open;
                        stack.push((c, 0));
                    }
                    Mark::Done => {}
                }
            } else {
                mark[v] = Mark::Done;
                stack.pop();
            }
        }
    }
    None
}

/// `D(m)`: nodes reachable from `m` along at least one edge, by depth-first
/// search from every node. Fails if the graph has a cycle.
pub fn dfs_descendants(n: usize, edges: &[(usize, usize)]) -> Result<Vec<Vec<usize>>, DataError> {
    let adj = adjacency(n, edges)?;
    if let Some(v) = find_cycle(&adj) {
        return Err(DataError::Graph(format!("cycle through node {v}")));
    }
    let mut seen = vec![usize::MAX; n];
    let mut out = Vec::with_capacity(n);
    let mut stack = Vec::new();
    for root in 0..n {
        let mut found = Vec::new();
        stack.clear();
        stack.extend(adj[root].iter().copied());
        while let Some(v) = stack.pop() {
            if seen[v] == root {
                continue;
            }
            seen[v] = root;
            found.push(v);
            stack.extend(adj[v].iter().copied().filter(|&c| seen[c] != root));
        }
        found.sort_unstable();
        out.push(found);
    }
    Ok(out)
}

/// Uniform sample of `min(k, |set|)` elements without replacement, sorted.
pub fn sample_descendants<R: Rng + ?Sized>(set: &[u32], k: usize, rng: &mut R) -> Vec<u32> {
    if set.len() <= k {
        return set.to_vec();
    }
    let mut picked: Vec<u32> = rand::seq::index::sample(rng, set.len(), k).into_iter().map(|i| set[i]).collect();
    picked.sort_unstable();
    picked
}
