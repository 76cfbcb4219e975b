//! Instance matching and the one-to-many lift from matched instances to
//! their ground-truth group masks.

use crate::dataio::{GroupLevel, SceneAnnotation};
use crate::error::{Error, Result};
use crate::geometry::{downsample_mask, InstanceMaskSet, Mask};
use crate::numerics::Tensor;

/// Dense `rows × cols` cost matrix; either side may be empty.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument("ragged cost matrix".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

/// Partial injective map from predicted to ground-truth indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    targets: Vec<Option<usize>>,
    cost: f64,
}

impl Assignment {
    /// Builds an assignment from explicit per-prediction targets.
    pub fn new(targets: Vec<Option<usize>>, cost: f64) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = targets.iter().flatten().find(|&&g| !seen.insert(g)) {
            return Err(Error::InvalidArgument(format!(
                "ground-truth index {dup} assigned twice"
            )));
        }
        Ok(Self { targets, cost })
    }

    pub fn unmatched(num_preds: usize) -> Self {
        Self {
            targets: vec![None; num_preds],
            cost: 0.0,
        }
    }

    pub fn target(&self, pred: usize) -> Option<usize> {
        self.targets.get(pred).copied().flatten()
    }

    pub fn targets(&self) -> &[Option<usize>] {
        &self.targets
    }

    /// `(pred, gt)` pairs in increasing prediction order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.targets
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.map(|g| (i, g)))
    }

    pub fn num_matched(&self) -> usize {
        self.targets.iter().flatten().count()
    }

    pub fn cost(&self) -> f64 {
        self.cost
    }
}

/// Minimum-cost rectangular assignment (Kuhn-Munkres with potentials on a
/// square matrix padded with a sentinel cost). Exactly `min(rows, cols)`
/// pairs are matched.
///
/// Among equally optimal assignments the lexicographically smallest one is
/// returned: lower predictions are matched first, each to the lowest
/// ground-truth index that still admits an optimal completion.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    if let Some(bad) = cost.data.iter().find(|c| !c.is_finite()) {
        return Err(Error::NonFinite(format!("cost matrix entry {bad}")));
    }
    let (n, m) = (cost.rows, cost.cols);
    if n == 0 || m == 0 {
        return Ok(Assignment::unmatched(n));
    }
    let all_rows: Vec<usize> = (0..n).collect();
    let all_cols: Vec<usize> = (0..m).collect();
    let (best, first) = solve(cost, &all_rows, &all_cols);
    let tol = 1e-9 * (1.0 + best.abs());

    let mut targets = vec![None; n];
    let mut free_cols = all_cols;
    let mut committed = 0.0;
    let mut current = first;
    for i in 0..n {
        let rest_rows: Vec<usize> = (i + 1..n).collect();
        // the current completion is optimal, so the scan stops at its choice
        let limit = current[i];
        let mut chosen = None;
        for (pos, &j) in free_cols.iter().enumerate() {
            if Some(j) == limit {
                chosen = Some(pos);
                break;
            }
            let mut cols = free_cols.clone();
            cols.remove(pos);
            let (rest, _) = solve(cost, &rest_rows, &cols);
            if (committed + cost.at(i, j) + rest - best).abs() <= tol {
                chosen = Some(pos);
                break;
            }
        }
        match chosen {
            Some(pos) => {
                let j = free_cols.remove(pos);
                targets[i] = Some(j);
                committed += cost.at(i, j);
            }
            None => targets[i] = None,
        }
        let (_, next) = solve(cost, &rest_rows, &free_cols);
        for (k, &r) in rest_rows.iter().enumerate() {
            current[r] = next[k];
        }
    }
    let total = targets
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.map(|j| cost.at(i, j)))
        .sum();
    Ok(Assignment {
        targets,
        cost: total,
    })
}

/// Optimal value and an optimal completion on the sub-matrix `rows × cols`.
/// The completion is indexed by global row id.
fn solve(cost: &CostMatrix, rows: &[usize], cols: &[usize]) -> (f64, Vec<Option<usize>>) {
    let mut out = vec![None; cost.rows];
    if rows.is_empty() || cols.is_empty() {
        return (0.0, out);
    }
    let max_abs = rows
        .iter()
        .flat_map(|&i| cols.iter().map(move |&j| cost.at(i, j).abs()))
        .fold(0.0, f64::max);
    let sentinel = 2.0 * max_abs + 1.0;
    let k = rows.len().max(cols.len());
    let c = |i: usize, j: usize| -> f64 {
        if i < rows.len() && j < cols.len() {
            cost.at(rows[i], cols[j])
        } else {
            sentinel
        }
    };
    // 1-based potentials formulation; column 0 is the virtual start
    let inf = f64::INFINITY;
    let mut u = vec![0.0; k + 1];
    let mut v = vec![0.0; k + 1];
    let mut p = vec![0usize; k + 1];
    let mut way = vec![0usize; k + 1];
    for i in 1..=k {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=k {
                if !used[j] {
                    let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=k {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut total = 0.0;
    for j in 1..=k {
        let i = p[j] - 1;
        if i < rows.len() && j - 1 < cols.len() {
            out[rows[i]] = Some(cols[j - 1]);
            total += cost.at(rows[i], cols[j - 1]);
        }
    }
    (total, out)
}

/// `1 − dice(pred, gt)`; two empty masks cost 0.
pub fn match_cost(pred: &Mask, gt: &Mask) -> Result<f64> {
    let inter = pred.intersection_area(gt)?;
    let denom = pred.area() + gt.area();
    if denom == 0 {
        return Ok(0.0);
    }
    Ok(1.0 - 2.0 * inter as f64 / denom as f64)
}

/// Matches the valid predictions of `preds` against `gts` with the given
/// pairwise cost. Padded predictions are never matched.
pub fn match_instances_with(
    preds: &InstanceMaskSet,
    gts: &[Mask],
    cost: impl Fn(&Mask, &Mask) -> Result<f64>,
) -> Result<Assignment> {
    let valid: Vec<usize> = (0..preds.capacity()).filter(|&i| preds.valid[i]).collect();
    let mut entries = Vec::with_capacity(valid.len() * gts.len());
    for &i in &valid {
        for g in gts {
            entries.push(cost(&preds.masks[i], g)?);
        }
    }
    let matrix = CostMatrix {
        rows: valid.len(),
        cols: gts.len(),
        data: entries,
    };
    let sub = hungarian(&matrix)?;
    let mut targets = vec![None; preds.capacity()];
    for (k, g) in sub.pairs() {
        targets[valid[k]] = Some(g);
    }
    Ok(Assignment {
        targets,
        cost: sub.cost,
    })
}

pub fn match_instances(preds: &InstanceMaskSet, gts: &[Mask]) -> Result<Assignment> {
    match_instances_with(preds, gts, match_cost)
}

/// Supervision for one scene after the one-to-many lift.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupTargets {
    /// `N × (H'·W')` rows of 0/1; zero for unmatched predictions.
    pub group_masks: Tensor,
    /// `N × N`, 1 iff both predictions map into one group.
    pub affinity: Tensor,
    /// `N × N`, 1 iff both predictions are matched.
    pub weight: Tensor,
    pub matched: Vec<bool>,
    pub height: usize,
    pub width: usize,
}

impl GroupTargets {
    /// Lifts `assignment` to groups: ground-truth instance `g` belongs to
    /// group `group_of[g]`, whose mask is `group_masks[group_of[g]]`.
    pub fn from_groups(
        assignment: &Assignment,
        group_of: &[usize],
        group_masks: &[Mask],
    ) -> Result<Self> {
        let n = assignment.targets.len();
        let (h, w) = group_masks.first().map_or((0, 0), Mask::dims);
        if n == 0 || h == 0 {
            return Err(Error::InvalidArgument(
                "group targets need at least one prediction slot and one group".into(),
            ));
        }
        let mut group = vec![None; n];
        for (i, g) in assignment.pairs() {
            let gid = *group_of.get(g).ok_or_else(|| {
                Error::Hierarchy(format!(
                    "prediction {i} is matched to instance {g}, which has no group"
                ))
            })?;
            if gid >= group_masks.len() {
                return Err(Error::Hierarchy(format!("group {gid} has no mask")));
            }
            group[i] = Some(gid);
        }
        let mut masks = vec![0.0; n * h * w];
        for (i, gid) in group.iter().enumerate() {
            if let Some(gid) = *gid {
                let m = &group_masks[gid];
                if m.dims() != (h, w) {
                    return Err(Error::shape(
                        "group mask",
                        &[h, w],
                        &[m.height(), m.width()],
                    ));
                }
                for (dst, &b) in masks[i * h * w..(i + 1) * h * w].iter_mut().zip(m.bits()) {
                    *dst = if b { 1.0 } else { 0.0 };
                }
            }
        }
        let mut affinity = vec![0.0; n * n];
        let mut weight = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if let (Some(a), Some(b)) = (group[i], group[j]) {
                    weight[i * n + j] = 1.0;
                    affinity[i * n + j] = if a == b { 1.0 } else { 0.0 };
                }
            }
        }
        Ok(Self {
            group_masks: Tensor::new(&[n, h * w], masks)?,
            affinity: Tensor::new(&[n, n], affinity)?,
            weight: Tensor::new(&[n, n], weight)?,
            matched: group.iter().map(Option::is_some).collect(),
            height: h,
            width: w,
        })
    }

    pub fn num_matched(&self) -> usize {
        self.matched.iter().filter(|&&m| m).count()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.group_masks.row(i)
    }
}

/// Group targets for predictions matched against `annotation`'s instances at
/// `level`, with group masks max-pooled by `factor`.
pub fn assign_groups(
    assignment: &Assignment,
    annotation: &SceneAnnotation,
    level: GroupLevel,
    factor: usize,
) -> Result<GroupTargets> {
    let group_of = annotation.group_ids(level);
    if group_of.is_empty() {
        return Err(Error::Hierarchy(format!(
            "scene {} has no instances for {level:?} grouping",
            annotation.image_id
        )));
    }
    let masks = annotation
        .group_masks(level)
        .iter()
        .map(|m| downsample_mask(m, factor))
        .collect::<Result<Vec<_>>>()?;
    GroupTargets::from_groups(assignment, &group_of, &masks)
}
