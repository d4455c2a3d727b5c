//! Exact dense linear assignment by shortest augmenting paths
//! (Jonker–Volgenant style: column reduction warm start, then one Dijkstra
//! augmentation per unassigned row).
//!
//! Costs are arbitrary finite `f64`; the solution is an exact optimal
//! permutation. Complexity O(n^3) worst case with a small constant; the
//! geometric cost matrices this crate produces stay far from the worst case.

use crate::error::{Error, Result};

/// Square cost matrix in row-major order.
pub struct CostMatrix<'a> {
    pub n: usize,
    pub costs: &'a [f64],
}

impl<'a> CostMatrix<'a> {
    pub fn new(n: usize, costs: &'a [f64]) -> Result<Self> {
        if costs.len() != n * n {
            return Err(Error::shape(format!(
                "cost matrix length {} != n^2 = {}",
                costs.len(),
                n * n
            )));
        }
        if costs.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("assignment costs".into()));
        }
        Ok(CostMatrix { n, costs })
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.costs[i * self.n + j]
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.costs[i * self.n..(i + 1) * self.n]
    }
}

const UNASSIGNED: usize = usize::MAX;

/// Optimal assignment: `assignment[i] = j` matches row i to column j.
/// Returns the assignment and the total cost under it.
pub fn solve_assignment(cost: &CostMatrix) -> (Vec<usize>, f64) {
    let n = cost.n;
    if n == 0 {
        return (Vec::new(), 0.0);
    }

    // Column potentials and the current partial matching.
    let mut v = vec![0.0f64; n];
    let mut row_of = vec![UNASSIGNED; n]; // column -> row
    let mut col_of = vec![UNASSIGNED; n]; // row -> column

    // Column reduction: v_j = min_i c_ij, assign the argmin row when free.
    for j in 0..n {
        let mut best = f64::INFINITY;
        let mut best_i = 0;
        for i in 0..n {
            let c = cost.at(i, j);
            if c < best {
                best = c;
                best_i = i;
            }
        }
        v[j] = best;
        if col_of[best_i] == UNASSIGNED {
            col_of[best_i] = j;
            row_of[j] = best_i;
        }
    }

    // Shortest augmenting path (Dijkstra over columns) for each free row.
    let mut dist = vec![0.0f64; n];
    let mut pred = vec![0usize; n];
    let mut visited = vec![false; n];

    for free_row in 0..n {
        if col_of[free_row] != UNASSIGNED {
            continue;
        }
        for j in 0..n {
            dist[j] = cost.at(free_row, j) - v[j];
            pred[j] = free_row;
            visited[j] = false;
        }
        let sink;
        let min_dist;
        loop {
            // pick the unvisited column with the smallest tentative distance
            let mut jmin = UNASSIGNED;
            let mut dmin = f64::INFINITY;
            for j in 0..n {
                if !visited[j] && dist[j] < dmin {
                    dmin = dist[j];
                    jmin = j;
                }
            }
            debug_assert!(jmin != UNASSIGNED, "augmenting path search exhausted");
            visited[jmin] = true;
            if row_of[jmin] == UNASSIGNED {
                sink = jmin;
                min_dist = dmin;
                break;
            }
            // relax through the row currently matched to jmin
            let i = row_of[jmin];
            let offset = dmin - (cost.at(i, jmin) - v[jmin]);
            let row_i = cost.row(i);
            for j in 0..n {
                if !visited[j] {
                    let nd = offset + row_i[j] - v[j];
                    if nd < dist[j] {
                        dist[j] = nd;
                        pred[j] = i;
                    }
                }
            }
        }
        // update potentials for visited columns
        for j in 0..n {
            if visited[j] && j != sink {
                v[j] += dist[j] - min_dist;
            }
        }
        // augment along the predecessor chain
        let mut j = sink;
        loop {
            let i = pred[j];
            row_of[j] = i;
            let next = col_of[i];
            col_of[i] = j;
            if i == free_row {
                break;
            }
            j = next;
        }
    }

    let total: f64 = (0..n).map(|i| cost.at(i, col_of[i])).sum();
    (col_of, total)
}

/// Exact minimum over all permutations, for n <= 8. Test oracle for
/// `solve_assignment`; errors on larger inputs instead of hanging.
pub fn brute_force_assignment(cost: &CostMatrix) -> Result<(Vec<usize>, f64)> {
    let n = cost.n;
    if n > 8 {
        return Err(Error::SizeLimit(format!(
            "brute force assignment limited to n <= 8, got {n}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best_perm = perm.clone();
    let mut best = eval_perm(cost, &perm);
    // Heap's algorithm
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            let val = eval_perm(cost, &perm);
            if val < best {
                best = val;
                best_perm = perm.clone();
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok((best_perm, best))
}

fn eval_perm(cost: &CostMatrix, perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| cost.at(i, j)).sum()
}
