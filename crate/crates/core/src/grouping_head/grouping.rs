use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct GroupingConfig {
    threshold: f64,
}

impl GroupingConfig {
    pub fn new(threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Config(format!(
                "group threshold must lie in (0, 1), got {threshold}"
            )));
        }
        Ok(Self { threshold })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl TryFrom<f64> for GroupingConfig {
    type Error = Error;

    fn try_from(t: f64) -> Result<Self> {
        Self::new(t)
    }
}

impl From<GroupingConfig> for f64 {
    fn from(c: GroupingConfig) -> f64 {
        c.threshold
    }
}

/// Disjoint-set forest with path halving and union by size.
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
    }
}

/// Connected components of `{(i, j) : i ≠ j valid, Â[i, j] ≥ t}` over the
/// valid instances. Groups are sorted by their smallest member; members are
/// ascending.
pub fn group_instances(
    affinity: &Tensor,
    valid: &[bool],
    cfg: &GroupingConfig,
) -> Result<Vec<Vec<usize>>> {
    let [n, m] = affinity.dims2("group_instances")?;
    if n != m || valid.len() != n {
        return Err(Error::shape(
            "group_instances",
            affinity.dims(),
            &[valid.len(), valid.len()],
        ));
    }
    let t = cfg.threshold();
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        for j in i + 1..n {
            if valid[i] && valid[j] && affinity.at(&[i, j]) >= t {
                uf.union(i, j);
            }
        }
    }
    let mut slot_of_root = vec![usize::MAX; n];
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in (0..n).filter(|&i| valid[i]) {
        let r = uf.find(i);
        if slot_of_root[r] == usize::MAX {
            slot_of_root[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot_of_root[r]].push(i);
    }
    Ok(groups)
}
