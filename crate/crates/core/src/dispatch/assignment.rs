//! Minimum-cost rectangular assignment (Hungarian method).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Cost;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatrixError {
    #[error("expected {expected} entries for a {rows}x{cols} matrix, got {got}")]
    Shape {
        rows: usize,
        cols: usize,
        expected: usize,
        got: usize,
    },
    #[error("entry ({row}, {col}) is negative or not finite")]
    Entry { row: usize, col: usize },
}

/// Dense cost matrix: rows are workers, columns are bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Cost> CostMatrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, MatrixError> {
        if data.len() != rows * cols {
            return Err(MatrixError::Shape {
                rows,
                cols,
                expected: rows * cols,
                got: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_admissible()) {
            return Err(MatrixError::Entry {
                row: pos / cols.max(1),
                col: pos % cols.max(1),
            });
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: Vec<Vec<T>>) -> Result<Self, MatrixError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|row| row.len() != c) {
            return Err(MatrixError::Shape {
                rows: r,
                cols: c,
                expected: r * c,
                got: r * c - c + bad.len(),
            });
        }
        Self::new(r, c, rows.into_iter().flatten().collect())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Result<Self, MatrixError> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.cols + col]
    }

    fn select(&self, rows: &[usize], cols: &[usize]) -> CostMatrix<T> {
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for &i in rows {
            for &j in cols {
                data.push(self.get(i, j));
            }
        }
        CostMatrix {
            rows: rows.len(),
            cols: cols.len(),
            data,
        }
    }

    fn transposed(&self) -> CostMatrix<T> {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.get(i, j));
            }
        }
        CostMatrix {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }
}

/// Matched `(row, col)` pairs sorted by row, and their summed cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment<T> {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: T,
}

/// Shortest-augmenting-path Hungarian method for `rows <= cols`, O(rows² · cols).
/// Returns `col_of_row`.
fn hungarian_wide<T: Cost>(c: &CostMatrix<T>) -> Vec<usize> {
    let n = c.rows;
    let m = c.cols;
    debug_assert!(n <= m);
    let inf = T::max_value();
    // 1-based with a virtual column 0, as in the classic formulation
    let mut u = vec![T::zero(); n + 1];
    let mut v = vec![T::zero(); m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut minv = vec![inf; m + 1];
    let mut used = vec![false; m + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        minv.fill(inf);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = c.get(i0 - 1, j - 1) - u[i0] - v[j];
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
                    u[owner[j]] = u[owner[j]] + delta;
                    v[j] = v[j] - delta;
                } else {
                    minv[j] = minv[j] - delta;
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

    let mut col_of_row = vec![usize::MAX; n];
    for j in 1..=m {
        if owner[j] != 0 {
            col_of_row[owner[j] - 1] = j - 1;
        }
    }
    col_of_row
}

/// Some minimum-cost matching of `min(rows, cols)` pairs.
///
/// Deterministic, but when several optima exist the one returned is
/// whichever the augmentation order reaches; see [`solve_assignment`] for
/// the canonical choice.
pub fn hungarian<T: Cost>(c: &CostMatrix<T>) -> Assignment<T> {
    if c.rows == 0 || c.cols == 0 {
        return Assignment {
            pairs: Vec::new(),
            total_cost: T::zero(),
        };
    }
    let mut pairs: Vec<(usize, usize)> = if c.rows <= c.cols {
        hungarian_wide(c).into_iter().enumerate().collect()
    } else {
        hungarian_wide(&c.transposed())
            .into_iter()
            .enumerate()
            .map(|(col, row)| (row, col))
            .collect()
    };
    pairs.sort_unstable();
    let total_cost = pairs
        .iter()
        .fold(T::zero(), |acc, &(i, j)| acc + c.get(i, j));
    Assignment { pairs, total_cost }
}

fn optimal_total<T: Cost>(c: &CostMatrix<T>, rows: &[usize], cols: &[usize]) -> T {
    if rows.is_empty() || cols.is_empty() {
        return T::zero();
    }
    hungarian(&c.select(rows, cols)).total_cost
}

/// Minimum-cost matching of `min(rows, cols)` pairs, choosing among all
/// optimal matchings the one whose row-sorted pair list is lexicographically
/// smallest.
///
/// The tie-break fixes rows in order, trying columns in ascending order and
/// keeping the first choice whose best completion still reaches the optimum.
/// That costs up to `rows · cols` extra solves of the residual problem.
pub fn solve_assignment<T: Cost>(c: &CostMatrix<T>) -> Assignment<T> {
    let k = c.rows.min(c.cols);
    if k == 0 {
        return hungarian(c);
    }
    let best = hungarian(c).total_cost;
    let mut free_cols: Vec<usize> = (0..c.cols).collect();
    let mut pairs = Vec::with_capacity(k);
    let mut acc = T::zero();

    for i in 0..c.rows {
        if pairs.len() == k {
            break;
        }
        let later_rows: Vec<usize> = (i + 1..c.rows).collect();
        let still_needed = k - pairs.len() - 1;
        let mut fallback: Option<(usize, T)> = None;
        let mut chosen = None;
        if later_rows.len() >= still_needed {
            for (pos, &j) in free_cols.iter().enumerate() {
                let rest: Vec<usize> = free_cols
                    .iter()
                    .enumerate()
                    .filter(|&(p, _)| p != pos)
                    .map(|(_, &col)| col)
                    .collect();
                let total = acc + c.get(i, j) + optimal_total(c, &later_rows, &rest);
                if total.same_total(best) {
                    chosen = Some(pos);
                    break;
                }
                if fallback.is_none_or(|(_, t)| total < t) {
                    fallback = Some((pos, total));
                }
            }
        }
        // leaving row i unmatched is only possible with spare rows
        let can_skip = later_rows.len() > still_needed;
        let pos = match chosen {
            Some(pos) => Some(pos),
            None if can_skip => None,
            None => fallback.map(|(pos, _)| pos),
        };
        if let Some(pos) = pos {
            let j = free_cols.remove(pos);
            acc = acc + c.get(i, j);
            pairs.push((i, j));
        }
    }
    Assignment {
        pairs,
        total_cost: acc,
    }
}
