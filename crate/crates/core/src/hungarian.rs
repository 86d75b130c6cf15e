//! Exact minimum-cost bipartite assignment via shortest augmenting paths
//! with dual potentials (the O(n^2 m) Hungarian algorithm).

use ndarray::Array2;

use crate::error::{Error, Result};

/// Injective assignment of every ground-truth column to a distinct row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    /// `(row, column)` pairs covering the smaller matrix side.
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn total_cost(&self, cost: &Array2<f64>) -> f64 {
        self.pairs.iter().map(|&(r, c)| cost[[r, c]]).sum()
    }

    /// Row assigned to a given column, if any.
    pub fn row_for(&self, col: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(_, c)| c == col).map(|&(r, _)| r)
    }

    pub fn col_for(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(r, _)| r == row).map(|&(_, c)| c)
    }
}

/// Finds the assignment of all `min(n, m)` items minimizing total cost.
/// Rows are predictions and columns ground truth; with `n >= m` every
/// column receives a distinct row. Errors on non-finite entries.
pub fn hungarian_match(cost: &Array2<f64>) -> Result<Assignment> {
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(
            "matching cost matrix contains non-finite entries".into(),
        ));
    }
    let (n, m) = cost.dim();
    if n == 0 || m == 0 {
        return Ok(Assignment { pairs: vec![] });
    }
    // solve with rows = smaller side; transpose if needed
    let transposed = n > m;
    let (rows, cols) = if transposed { (m, n) } else { (n, m) };
    let at = |i: usize, j: usize| -> f64 {
        if transposed {
            cost[[j, i]]
        } else {
            cost[[i, j]]
        }
    };

    // 1-based potentials; p[j] = row matched to column j
    let mut u = vec![0.0f64; rows + 1];
    let mut v = vec![0.0f64; cols + 1];
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
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

    let mut pairs = Vec::with_capacity(rows);
    for j in 1..=cols {
        if p[j] != 0 {
            let (r, c) = (p[j] - 1, j - 1);
            pairs.push(if transposed { (c, r) } else { (r, c) });
        }
    }
    pairs.sort_unstable();
    Ok(Assignment { pairs })
}
