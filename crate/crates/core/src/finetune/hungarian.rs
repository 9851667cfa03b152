//! Minimum-cost rectangular assignment with a deterministic tie-break.

use crate::error::{Error, Result};

/// Optimal assignment of `min(n, m)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

/// Shortest-augmenting-path solver with potentials; requires `n ≤ m`.
/// Returns the column of each row.
fn solve_rows(cost: &[f64], n: usize, m: usize) -> Vec<usize> {
    debug_assert!(n <= m);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[(i0 - 1) * m + j - 1] - u[i0] - v[j];
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
    let mut col = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            col[p[j] - 1] = j - 1;
        }
    }
    col
}

/// Optimal pairs of an arbitrary `n × m` matrix, sorted by row.
fn solve(cost: &[f64], n: usize, m: usize) -> (Vec<(usize, usize)>, f64) {
    if n == 0 || m == 0 {
        return (Vec::new(), 0.0);
    }
    let mut pairs: Vec<(usize, usize)> = if n <= m {
        solve_rows(cost, n, m).into_iter().enumerate().collect()
    } else {
        let mut t = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                t[j * n + i] = cost[i * m + j];
            }
        }
        solve_rows(&t, m, n).into_iter().enumerate().map(|(j, i)| (i, j)).collect()
    };
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(i, j)| cost[i * m + j]).sum();
    (pairs, total)
}

fn submatrix(cost: &[f64], m: usize, rows: &[usize], cols: &[usize]) -> Vec<f64> {
    rows.iter().flat_map(|&i| cols.iter().map(move |&j| cost[i * m + j])).collect()
}

/// Minimum-cost assignment of `min(n, m)` pairs for a row-major `n × m`
/// cost matrix. Among optimal assignments (within a relative tolerance of
/// `1e-9`) the lexicographically smallest row-sorted pair list is returned.
pub fn hungarian(cost: &[f64], n: usize, m: usize) -> Result<Assignment> {
    if cost.len() != n * m {
        return Err(Error::shape("hungarian", format!("{} entries for {n}×{m}", cost.len())));
    }
    if cost.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("hungarian: NaN in cost matrix"));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("hungarian: infinite cost"));
    }
    let (pairs, best) = solve(cost, n, m);
    let tol = 1e-9 * (1.0 + best.abs());
    let big = 1.0 + 2.0 * cost.iter().map(|v| v.abs()).sum::<f64>();

    // Forbid each chosen pair in turn: a tie exists iff some alternative is
    // also optimal.
    let mut tied = false;
    let mut scratch = cost.to_vec();
    for &(i, j) in &pairs {
        scratch[i * m + j] = big;
        let (_, alt) = solve(&scratch, n, m);
        scratch[i * m + j] = cost[i * m + j];
        if alt <= best + tol {
            tied = true;
            break;
        }
    }
    if !tied {
        return Ok(Assignment { pairs, cost: best });
    }

    // Greedy lexicographic construction: accept the smallest pair that can
    // still be completed to an optimal assignment.
    let k = n.min(m);
    let mut chosen: Vec<(usize, usize)> = Vec::with_capacity(k);
    let mut used_cols = vec![false; m];
    let mut acc = 0.0;
    let mut next_row = 0;
    for step in 0..k {
        let mut accepted = None;
        'search: for r in next_row..n {
            for c in 0..m {
                if used_cols[c] {
                    continue;
                }
                let rows: Vec<usize> = (r + 1..n).collect();
                let cols: Vec<usize> = (0..m).filter(|&j| !used_cols[j] && j != c).collect();
                if rows.len().min(cols.len()) != k - step - 1 {
                    continue;
                }
                let (_, rest) = solve(&submatrix(cost, m, &rows, &cols), rows.len(), cols.len());
                if acc + cost[r * m + c] + rest <= best + tol {
                    accepted = Some((r, c));
                    break 'search;
                }
            }
        }
        let (r, c) = accepted.ok_or_else(|| Error::Invariant("hungarian: no completion reaches the optimum".into()))?;
        chosen.push((r, c));
        used_cols[c] = true;
        acc += cost[r * m + c];
        next_row = r + 1;
    }
    Ok(Assignment { pairs: chosen, cost: acc })
}
