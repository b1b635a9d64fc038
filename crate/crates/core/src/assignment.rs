//! Minimum-cost one-to-one assignment (Hungarian method, O(n³)).

use crate::error::{shape_err, Result};

/// Solves `min Σ_i cost[i][assign[i]]` over permutations of a square matrix.
/// Returns `assign`, mapping each row to its column.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if let Some(row) = cost.iter().find(|r| r.len() != n) {
        return Err(shape_err!("cost matrix must be square: {n} rows, a row of {}", row.len()));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(shape_err!("cost matrix holds a non-finite value"));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // Shortest augmenting paths with row potentials `u` and column
    // potentials `v`; index 0 is a virtual column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for c in 1..=n {
                if used[c] {
                    continue;
                }
                let reduced = cost[r - 1][c - 1] - u[r] - v[c];
                if reduced < minv[c] {
                    minv[c] = reduced;
                    way[c] = col0;
                }
                if minv[c] < delta {
                    delta = minv[c];
                    col1 = c;
                }
            }
            for c in 0..=n {
                if used[c] {
                    u[owner[c]] += delta;
                    v[c] -= delta;
                } else {
                    minv[c] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for c in 1..=n {
        assign[owner[c] - 1] = c - 1;
    }
    Ok(assign)
}

/// Maximum-weight variant for rectangular matrices: pads to square with
/// zeros and returns `(row, col)` pairs between real rows and columns.
pub fn max_weight_matching(weight: &[Vec<f64>], cols: usize) -> Result<Vec<(usize, usize)>> {
    let rows = weight.len();
    let n = rows.max(cols);
    let max = weight.iter().flatten().copied().fold(0.0, f64::max);
    let mut cost = vec![vec![max; n]; n];
    for (i, row) in weight.iter().enumerate() {
        if row.len() != cols {
            return Err(shape_err!("row {i} has {} weights, expected {cols}", row.len()));
        }
        for (j, &w) in row.iter().enumerate() {
            cost[i][j] = max - w;
        }
    }
    Ok(hungarian(&cost)?
        .into_iter()
        .enumerate()
        .filter(|&(i, j)| i < rows && j < cols)
        .collect())
}
