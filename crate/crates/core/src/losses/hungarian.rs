//! Minimum-cost bipartite assignment on dense rectangular cost matrices.
//!
//! The matrix is padded to square with zero-cost dummy rows or columns and
//! solved with the shortest-augmenting-path form of the Hungarian method
//! (row potentials `u`, column potentials `v`). Among all optimal assignments
//! the lexicographically smallest row→column sequence is returned: every
//! optimal assignment is a perfect matching on the tight edges
//! (`c[i][j] − u[i] − v[j] ≈ 0`), so rows are fixed one by one to their lowest
//! tight column that still admits a perfect tight matching. Leaving a row
//! unmatched ranks after every real column.

use serde::Serialize;

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    costs: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, costs: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Empty("cost matrix"));
        }
        check_len("cost matrix data", rows * cols, costs.len())?;
        if let Some(i) = costs.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFinite {
                context: "cost matrix",
                index: i,
            });
        }
        Ok(Self { rows, cols, costs })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut costs = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_len("cost matrix row", cols, r.len())?;
            costs.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, costs)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.costs[r * self.cols + c]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row; `min(rows, cols)` entries.
    pub pairs: Vec<(usize, usize)>,
    /// Sum of matched costs accumulated in row order.
    pub total_cost: f64,
}

impl Assignment {
    pub fn col_for_row(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == row).map(|p| p.1)
    }
}

pub fn hungarian(costs: &CostMatrix) -> Assignment {
    let n = costs.rows.max(costs.cols);
    let padded: Vec<f64> = (0..n * n)
        .map(|k| {
            let (r, c) = (k / n, k % n);
            if r < costs.rows && c < costs.cols {
                costs.get(r, c)
            } else {
                0.0
            }
        })
        .collect();
    let square = |r: usize, c: usize| padded[r * n + c];

    let (mut col_of_row, u, v) = solve_square(n, &square);

    let scale = padded.iter().fold(1.0_f64, |m, c| m.max(c.abs()));
    let tol = 1e-9 * scale;
    let tight = |r: usize, c: usize| square(r, c) - u[r] - v[c] <= tol;

    let mut row_of_col = vec![0; n];
    for (r, &c) in col_of_row.iter().enumerate() {
        row_of_col[c] = r;
    }
    let mut fixed = vec![false; n];
    for r in 0..costs.rows {
        for j in 0..n {
            if !tight(r, j) {
                continue;
            }
            if col_of_row[r] == j {
                break;
            }
            let owner = row_of_col[j];
            if fixed[owner] {
                continue;
            }
            if let Some(path) = alternating_path(
                n,
                owner,
                col_of_row[r],
                j,
                r,
                &fixed,
                &row_of_col,
                &tight,
            ) {
                // path: owner takes path[0], its previous owner takes path[1], ...
                let mut row = owner;
                for &col in &path {
                    let next = row_of_col[col];
                    col_of_row[row] = col;
                    row_of_col[col] = row;
                    row = next;
                }
                col_of_row[r] = j;
                row_of_col[j] = r;
                break;
            }
        }
        fixed[r] = true;
    }

    let mut pairs = Vec::with_capacity(costs.rows.min(costs.cols));
    let mut total_cost = 0.0;
    for (r, &c) in col_of_row.iter().enumerate().take(costs.rows) {
        if c < costs.cols {
            pairs.push((r, c));
            total_cost += costs.get(r, c);
        }
    }
    Assignment { pairs, total_cost }
}

/// Breadth-first search for an alternating path in the tight graph from
/// `start` (a row that must give up its column) to `target` (the column being
/// freed), avoiding the `banned` column, the `moving` row and fixed rows.
/// Returns the sequence of columns taken along the path, ending at `target`.
#[allow(clippy::too_many_arguments)]
fn alternating_path(
    n: usize,
    start: usize,
    target: usize,
    banned: usize,
    moving: usize,
    fixed: &[bool],
    row_of_col: &[usize],
    tight: &dyn Fn(usize, usize) -> bool,
) -> Option<Vec<usize>> {
    let mut parent_col: Vec<Option<usize>> = vec![None; n];
    let mut seen_col = vec![false; n];
    seen_col[banned] = true;
    let mut queue = std::collections::VecDeque::from([(start, None::<usize>)]);
    while let Some((row, via)) = queue.pop_front() {
        for col in 0..n {
            if seen_col[col] || row_of_col[col] == row || !tight(row, col) {
                continue;
            }
            seen_col[col] = true;
            parent_col[col] = via;
            if col == target {
                let mut path = vec![col];
                let mut cur = via;
                while let Some(c) = cur {
                    path.push(c);
                    cur = parent_col[c];
                }
                path.reverse();
                return Some(path);
            }
            let next = row_of_col[col];
            if next == moving || fixed[next] {
                continue;
            }
            queue.push_back((next, Some(col)));
        }
    }
    None
}

/// Square solver returning the row→column matching and the dual potentials.
fn solve_square(n: usize, cost: &dyn Fn(usize, usize) -> f64) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    // 1-indexed; index 0 is the virtual root column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
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
    let mut col_of_row = vec![0; n];
    for j in 1..=n {
        col_of_row[p[j] - 1] = j - 1;
    }
    (col_of_row, u[1..].to_vec(), v[1..].to_vec())
}
