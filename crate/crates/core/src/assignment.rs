//! Minimum-cost linear assignment (Hungarian method, shortest augmenting
//! paths with dual potentials, `O(n^3)`).
//!
//! Rectangular problems are padded to square with a sentinel cost that no
//! optimal solution prefers over a real cell. Maximization callers go through
//! [`solve_max_assignment`], which negates the matrix for them.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentResult {
    /// `(row, col)` pairs, sorted by row, injective on both sides.
    /// Exactly `min(rows, cols)` pairs.
    pub mapping: Vec<(usize, usize)>,
    /// Sum of the selected cells.
    pub total_cost: f64,
}

impl AssignmentResult {
    pub fn column_for_row(&self, row: usize) -> Option<usize> {
        self.mapping.iter().find(|&&(r, _)| r == row).map(|&(_, c)| c)
    }
}

pub fn solve_assignment(cost: ArrayView2<'_, f64>) -> Result<AssignmentResult> {
    let (rows, cols) = cost.dim();
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument("cost matrix must be non-empty".into()));
    }
    let mut max_abs = 0.0f64;
    for ((r, c), &x) in cost.indexed_iter() {
        if !x.is_finite() {
            return Err(Error::NonFiniteCost { row: r, col: c });
        }
        max_abs = max_abs.max(x.abs());
    }

    let n = rows.max(cols);
    let sentinel = 1.0 + max_abs * rows.min(cols) as f64;
    let mut square = Array2::from_elem((n, n), sentinel);
    square.slice_mut(ndarray::s![..rows, ..cols]).assign(&cost);

    let row_to_col = hungarian_square(square.view());
    let mapping: Vec<(usize, usize)> = row_to_col
        .into_iter()
        .enumerate()
        .filter(|&(r, c)| r < rows && c < cols)
        .collect();
    let total_cost = mapping.iter().map(|&(r, c)| cost[[r, c]]).sum();
    Ok(AssignmentResult { mapping, total_cost })
}

/// Maximum-weight assignment; `total_cost` reports the maximized sum.
pub fn solve_max_assignment(weights: ArrayView2<'_, f64>) -> Result<AssignmentResult> {
    let negated = weights.mapv(|x| -x);
    let mut result = solve_assignment(negated.view())?;
    result.total_cost = -result.total_cost;
    Ok(result)
}

/// Row-to-column optimal permutation of a square matrix.
fn hungarian_square(a: ArrayView2<'_, f64>) -> Vec<usize> {
    let n = a.nrows();
    // 1-based arrays; index 0 is the virtual root of each augmenting tree.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        col_owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = a[[i0 - 1, j - 1]] - u[i0] - v[j];
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
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[col_owner[j] - 1] = j - 1;
    }
    row_to_col
}
