//! Minimum-cost bipartite matching between prediction slots and ground-truth
//! triples.
//!
//! The core solver is the classic potentials/augmenting-path algorithm in
//! O(n^3). On top of it, ties between equal-cost optima are broken toward the
//! lexicographically smallest (slot, gt) pair list via fix-and-verify, so
//! matching is fully deterministic.

use crate::error::{Error, Result};

/// Relative tolerance used when deciding whether a candidate pair still
/// achieves the optimal total cost.
const TIE_TOL: f64 = 1e-9;

/// Match rows (prediction slots) to columns (ground truths) of `cost`,
/// minimizing total cost. Returns min(rows, cols) pairs sorted by row index.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<Vec<(usize, usize)>> {
    let k = cost.len();
    let g = if k == 0 { 0 } else { cost[0].len() };
    if k == 0 || g == 0 {
        return Ok(Vec::new());
    }
    for row in cost {
        if row.len() != g {
            return Err(Error::invariant("cost matrix rows have unequal lengths"));
        }
        if row.iter().any(|c| !c.is_finite()) {
            return Err(Error::invariant("cost matrix contains non-finite entries"));
        }
    }

    let best = optimal_cost(cost, &(0..k).collect::<Vec<_>>(), &(0..g).collect::<Vec<_>>());
    let scale = 1.0f64.max(best.abs());

    let mut fixed: Vec<(usize, usize)> = Vec::new();
    let mut rows_left: Vec<usize> = (0..k).collect();
    let mut cols_left: Vec<usize> = (0..g).collect();
    let mut fixed_cost = 0.0;
    for i in 0..k {
        if cols_left.is_empty() {
            break;
        }
        rows_left.retain(|&r| r != i);
        let mut chosen = None;
        for (ci, &c) in cols_left.iter().enumerate() {
            let mut rest_cols = cols_left.clone();
            rest_cols.remove(ci);
            let sub = optimal_cost(cost, &rows_left, &rest_cols);
            let total = fixed_cost + cost[i][c] + sub;
            if total <= best + TIE_TOL * scale {
                chosen = Some((ci, c));
                break;
            }
        }
        match chosen {
            Some((ci, c)) => {
                fixed.push((i, c));
                fixed_cost += cost[i][c];
                cols_left.remove(ci);
            }
            None => {
                // row i is unmatched in every optimal assignment that extends
                // the pairs fixed so far; verify the remainder is achievable
                debug_assert!(
                    fixed_cost + optimal_cost(cost, &rows_left, &cols_left)
                        <= best + TIE_TOL * scale
                );
            }
        }
    }
    Ok(fixed)
}

/// Total cost of an optimal assignment restricted to the given rows/cols,
/// matching min(|rows|, |cols|) pairs. Zero when either side is empty.
fn optimal_cost(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    if rows.len() <= cols.len() {
        let a: Vec<Vec<f64>> =
            rows.iter().map(|&r| cols.iter().map(|&c| cost[r][c]).collect()).collect();
        solve_rect(&a)
    } else {
        // transpose so every row of the solver input gets matched
        let a: Vec<Vec<f64>> =
            cols.iter().map(|&c| rows.iter().map(|&r| cost[r][c]).collect()).collect();
        solve_rect(&a)
    }
}

/// Potentials algorithm on an n x m matrix with n <= m; every row is matched.
fn solve_rect(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let m = a[0].len();
    debug_assert!(n <= m);
    let inf = f64::INFINITY;
    // 1-based potentials; p[j] = row assigned to column j (0 = none)
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
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
    for j in 1..=m {
        if p[j] != 0 {
            total += a[p[j] - 1][j - 1];
        }
    }
    total
}
