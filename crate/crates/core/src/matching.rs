//! Optimal bipartite matching between ground-truth instances and queries.
//!
//! Training assigns each ground-truth pair to exactly one query by minimizing
//! the total matching cost with the Hungarian algorithm (shortest augmenting
//! path with potentials, `O(n^2 m)`), which is exact — tests verify it
//! against exhaustive enumeration. Rows are ground-truth instances, columns
//! are queries; the matrix must be no taller than wide.

use ndarray::Array2;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MatchError {
    #[error("cost matrix has {rows} rows but only {cols} columns; every row needs a column")]
    RowsExceedCols { rows: usize, cols: usize },
    #[error("cost matrix entry ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },
}

/// An injective map from ground-truth instances to queries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    /// `gt_to_query[i]` is the query matched to ground-truth instance `i`.
    pub gt_to_query: Vec<usize>,
    pub num_queries: usize,
}

impl Assignment {
    /// Inverse view: for each query, the matched ground-truth index if any.
    pub fn query_to_gt(&self) -> Vec<Option<usize>> {
        let mut inv = vec![None; self.num_queries];
        for (gt, &q) in self.gt_to_query.iter().enumerate() {
            inv[q] = Some(gt);
        }
        inv
    }

    pub fn total_cost(&self, cost: &Array2<f64>) -> f64 {
        self.gt_to_query
            .iter()
            .enumerate()
            .map(|(gt, &q)| cost[[gt, q]])
            .sum()
    }
}

/// Finds the minimum-total-cost assignment of rows to distinct columns.
pub fn hungarian_match(cost: &Array2<f64>) -> Result<Assignment, MatchError> {
    let (rows, cols) = cost.dim();
    if rows > cols {
        return Err(MatchError::RowsExceedCols { rows, cols });
    }
    for ((r, c), &v) in cost.indexed_iter() {
        if !v.is_finite() {
            return Err(MatchError::NonFinite { row: r, col: c });
        }
    }
    if rows == 0 {
        return Ok(Assignment {
            gt_to_query: Vec::new(),
            num_queries: cols,
        });
    }

    // Shortest augmenting path with row/column potentials, 1-indexed with a
    // virtual column 0 holding the row currently being placed.
    let mut u = vec![0.0f64; rows + 1];
    let mut v = vec![0.0f64; cols + 1];
    let mut col_to_row = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        col_to_row[0] = i;
        let mut j0 = 0usize;
        let mut min_slack = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = col_to_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let slack = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if slack < min_slack[j] {
                    min_slack[j] = slack;
                    way[j] = j0;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[col_to_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if col_to_row[j0] == 0 {
                break;
            }
        }
        // Walk the augmenting path backwards, shifting assignments.
        loop {
            let j1 = way[j0];
            col_to_row[j0] = col_to_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut gt_to_query = vec![usize::MAX; rows];
    for j in 1..=cols {
        if col_to_row[j] != 0 {
            gt_to_query[col_to_row[j] - 1] = j - 1;
        }
    }
    debug_assert!(gt_to_query.iter().all(|&q| q != usize::MAX));
    Ok(Assignment {
        gt_to_query,
        num_queries: cols,
    })
}
