//! Minimum-cost bipartite assignment (Hungarian algorithm, shortest
//! augmenting paths with dual potentials, O(n³)).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::CostMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub prev: usize,
    pub cur: usize,
    pub cost: f64,
}

/// Solves the assignment problem on `cost` (rows = previous queries, columns
/// = current queries). Rectangular inputs are padded to square with a
/// constant `1 + max` entry; pad matches are dropped, so exactly
/// `min(rows, cols)` pairs come back, sorted by row.
///
/// Ties are resolved towards the lowest column index during each augmenting
/// search, which makes the result a deterministic function of the matrix.
pub fn hungarian(cost: &CostMatrix) -> Vec<MatchedPair> {
    let (rows, cols) = cost.dim();
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let n = rows.max(cols);
    let pad = 1.0 + cost.max();
    let a = Array2::from_shape_fn((n, n), |(i, j)| if i < rows && j < cols { cost.get(i, j) } else { pad });

    // 1-based arrays; index 0 is the virtual root of each search.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0usize;
        let mut min_v = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = a[[i0 - 1, j - 1]] - u[i0] - v[j];
                if reduced < min_v[j] {
                    min_v[j] = reduced;
                    way[j] = j0;
                }
                if min_v[j] < delta {
                    delta = min_v[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_v[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<MatchedPair> = (1..=n)
        .filter_map(|j| {
            let (i, j) = (row_of_col[j] - 1, j - 1);
            (i < rows && j < cols).then(|| MatchedPair {
                prev: i,
                cur: j,
                cost: cost.get(i, j),
            })
        })
        .collect();
    pairs.sort_by_key(|p| p.prev);
    pairs
}

pub fn total_cost(pairs: &[MatchedPair]) -> f64 {
    pairs.iter().map(|p| p.cost).sum()
}
