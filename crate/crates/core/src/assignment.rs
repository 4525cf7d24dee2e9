//! Minimum-cost cluster/label matching.
//!
//! [`hungarian_solve`] runs the O(K³) shortest-augmenting-path form of the
//! Hungarian method, which also yields optimal dual potentials `u`, `v`.
//! Every optimal assignment uses only edges with zero reduced cost
//! `c[r][j] − u[r] − v[j]`, so the lexicographically smallest optimal
//! permutation is found by greedily re-routing the matching inside that
//! tight subgraph, row by row.

use std::collections::VecDeque;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Square matrix of match costs, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    k: usize,
    costs: Vec<f64>,
}

impl CostMatrix {
    pub fn new(k: usize, costs: Vec<f64>) -> Result<Self> {
        if costs.len() != k * k {
            return Err(Error::Contract(format!(
                "cost matrix must be square: {} entries for K={k}",
                costs.len()
            )));
        }
        if let Some(i) = costs.iter().position(|c| !c.is_finite()) {
            return Err(Error::Contract(format!(
                "cost matrix entry ({}, {}) is not finite",
                i / k.max(1),
                i % k.max(1)
            )));
        }
        Ok(CostMatrix { k, costs })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Contract("cost matrix must be square".into()));
        }
        Self::new(k, rows.concat())
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.costs[row * self.k + col]
    }

    /// `Σ_r cost[r, perm[r]]`, summed in row order.
    pub fn total(&self, perm: &[usize]) -> f64 {
        perm.iter().enumerate().map(|(r, &c)| self.get(r, c)).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentResult {
    /// `perm[row]` is the column assigned to `row`.
    pub perm: Vec<usize>,
    pub total_cost: f64,
}

impl AssignmentResult {
    /// Row assigned to each column.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (r, &c) in self.perm.iter().enumerate() {
            inv[c] = r;
        }
        inv
    }
}

/// Minimum-cost perfect matching. Among optimal matchings the
/// lexicographically smallest `perm` is returned.
pub fn hungarian_solve(m: &CostMatrix) -> AssignmentResult {
    let k = m.size();
    if k == 0 {
        return AssignmentResult {
            perm: Vec::new(),
            total_cost: 0.0,
        };
    }
    let (mut perm, u, v) = shortest_augmenting_path(m);
    let scale = m.costs.iter().fold(1.0f64, |a, c| a.max(c.abs()));
    let eps = 1e-10 * scale;
    let tight = |r: usize, c: usize| m.get(r, c) - u[r] - v[c] <= eps;
    lexicographic_refine(k, &mut perm, tight);
    AssignmentResult {
        total_cost: m.total(&perm),
        perm,
    }
}

/// Jonker–Volgenant style solver. Returns the row→column matching and the
/// row/column potentials.
fn shortest_augmenting_path(m: &CostMatrix) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let k = m.size();
    // 1-based internally; index 0 is the virtual source column/row.
    let mut u = vec![0.0; k + 1];
    let mut v = vec![0.0; k + 1];
    let mut owner = vec![0usize; k + 1];
    let mut way = vec![0usize; k + 1];
    for row in 1..=k {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=k {
                if used[j] {
                    continue;
                }
                let cur = m.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=k {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; k];
    for j in 1..=k {
        perm[owner[j] - 1] = j - 1;
    }
    (perm, u[1..].to_vec(), v[1..].to_vec())
}

/// Rewrite a perfect matching of the tight graph into the lexicographically
/// smallest one.
fn lexicographic_refine(k: usize, perm: &mut [usize], tight: impl Fn(usize, usize) -> bool) {
    let mut owner = vec![0; k];
    for (r, &c) in perm.iter().enumerate() {
        owner[c] = r;
    }
    let mut fixed_col = vec![false; k];
    for r in 0..k {
        let current = perm[r];
        for c in 0..current {
            if fixed_col[c] || !tight(r, c) {
                continue;
            }
            // Row owner[c] must give up c and reach the column r frees up
            // along an alternating path through unfixed rows.
            if let Some(path) =
                alternating_path(k, perm, &owner, &fixed_col, owner[c], c, current, &tight)
            {
                for (row, col) in path {
                    perm[row] = col;
                    owner[col] = row;
                }
                perm[r] = c;
                owner[c] = r;
                break;
            }
        }
        fixed_col[perm[r]] = true;
    }
}

/// BFS from `start_row` for a re-assignment that ends in column `target`,
/// never using `banned` or fixed columns. Returns the `(row, new column)`
/// moves along the path.
#[allow(clippy::too_many_arguments)]
fn alternating_path(
    k: usize,
    perm: &[usize],
    owner: &[usize],
    fixed_col: &[bool],
    start_row: usize,
    banned: usize,
    target: usize,
    tight: &impl Fn(usize, usize) -> bool,
) -> Option<Vec<(usize, usize)>> {
    // parent[col] = row that would move into col.
    let mut parent: Vec<Option<usize>> = vec![None; k];
    let mut seen_row = vec![false; k];
    let mut queue = VecDeque::from([start_row]);
    seen_row[start_row] = true;
    while let Some(row) = queue.pop_front() {
        for col in 0..k {
            if col == banned
                || fixed_col[col]
                || parent[col].is_some()
                || col == perm[row]
                || !tight(row, col)
            {
                continue;
            }
            parent[col] = Some(row);
            if col == target {
                let mut moves = Vec::new();
                let mut c = col;
                loop {
                    let r = parent[c].expect("path parent");
                    moves.push((r, c));
                    if r == start_row {
                        return Some(moves);
                    }
                    c = perm[r];
                }
            }
            let next = owner[col];
            if !seen_row[next] {
                seen_row[next] = true;
                queue.push_back(next);
            }
        }
    }
    None
}

/// `costs[k, l] = Σ_{i : labels[i] = l} −log softmax(logits[:, i])[k]`: the
/// total negative log-probability of explaining the points of label `l`
/// with predicted cluster `k`. Labels with no points give zero columns.
pub fn build_cluster_cost<F: Scalar>(logits: &Array<F>, labels: &[usize]) -> Result<CostMatrix> {
    let &[k, n] = logits.shape() else {
        return Err(Error::shape("build_cluster_cost", logits.shape(), &[0, 0]));
    };
    if n == 0 || labels.len() != n {
        return Err(Error::shape("build_cluster_cost", &[k, n], &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Contract(format!(
            "label {bad} out of range for K={k}"
        )));
    }
    let mut costs = vec![0.0; k * k];
    let mut column = vec![0.0; k];
    for (i, &label) in labels.iter().enumerate() {
        for (kk, c) in column.iter_mut().enumerate() {
            *c = logits.data()[kk * n + i].f64();
        }
        let lse = log_sum_exp(&column);
        for (kk, &c) in column.iter().enumerate() {
            costs[kk * k + label] += lse - c;
        }
    }
    CostMatrix::new(k, costs)
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_favoring() {
        let k = 4;
        let rows: Vec<Vec<f64>> = (0..k)
            .map(|r| (0..k).map(|c| if r == c { 0.0 } else { 1.0 }).collect())
            .collect();
        let res = hungarian_solve(&CostMatrix::from_rows(&rows).unwrap());
        assert_eq!(res.perm, vec![0, 1, 2, 3]);
        assert_eq!(res.total_cost, 0.0);
    }

    #[test]
    fn two_by_two_by_hand() {
        let m = CostMatrix::from_rows(&[vec![4.0, 1.0], vec![2.0, 3.0]]).unwrap();
        let res = hungarian_solve(&m);
        assert_eq!(res.perm, vec![1, 0]);
        assert_eq!(res.total_cost, 3.0);
    }

    #[test]
    fn all_equal_costs_pick_identity() {
        let m = CostMatrix::new(5, vec![2.5; 25]).unwrap();
        assert_eq!(hungarian_solve(&m).perm, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn ties_resolve_lexicographically() {
        // [0, 1, 2] and [0, 2, 1] both cost 2.
        let m = CostMatrix::from_rows(&[
            vec![0.0, 0.0, 5.0],
            vec![5.0, 1.0, 1.0],
            vec![5.0, 1.0, 1.0],
        ])
        .unwrap();
        let res = hungarian_solve(&m);
        assert_eq!(res.total_cost, 2.0);
        assert_eq!(res.perm, vec![0, 1, 2]);

        let m = CostMatrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        assert_eq!(hungarian_solve(&m).perm, vec![1, 2, 0]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(CostMatrix::new(2, vec![1.0; 3]).is_err());
        assert!(CostMatrix::new(2, vec![1.0, f64::NAN, 0.0, 0.0]).is_err());
        assert!(CostMatrix::from_rows(&[vec![1.0, 2.0], vec![1.0]]).is_err());
    }

    #[test]
    fn empty_matrix() {
        let res = hungarian_solve(&CostMatrix::new(0, vec![]).unwrap());
        assert!(res.perm.is_empty());
    }

    #[test]
    fn uniform_logits_cost_is_count_times_ln_k() {
        let labels = vec![0, 2, 2, 1, 2];
        let logits = Array::<f64>::zeros(&[10, 5]);
        let m = build_cluster_cost(&logits, &labels).unwrap();
        let counts = [1.0, 1.0, 3.0];
        for k in 0..10 {
            for l in 0..10 {
                let expect = counts.get(l).copied().unwrap_or(0.0) * 10f64.ln();
                assert!((m.get(k, l) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn label_out_of_range() {
        let logits = Array::<f64>::zeros(&[3, 2]);
        assert!(build_cluster_cost(&logits, &[0, 3]).is_err());
    }
}
