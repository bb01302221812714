//! Linear assignment with a deterministic tie-break.
//!
//! The solver is the O(n³) shortest-augmenting-path method with dual
//! potentials. Among all optimal assignments the lexicographically smallest
//! one is returned: rows are fixed one at a time to the smallest column that
//! still admits an optimal completion. Only edges that are tight under the
//! optimal potentials can appear in an optimal assignment, so usually a
//! single candidate remains and no extra solve is needed.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `perm[row]` is the column assigned to `row`.
    pub perm: Vec<usize>,
    pub cost: f64,
}

struct Solution {
    col_of_row: Vec<usize>,
    u: Vec<f64>,
    v: Vec<f64>,
    total: f64,
}

/// Minimum-cost assignment of every row of `c` (`n <= m`) to distinct
/// columns.
fn solve(c: &[f64], n: usize, m: usize) -> Solution {
    // 1-based arrays; index 0 is the virtual root column/row
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
                    let cur = c[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
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
    let mut col_of_row = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            col_of_row[p[j] - 1] = j - 1;
        }
    }
    let total = (0..n).map(|i| c[i * m + col_of_row[i]]).sum();
    Solution {
        col_of_row,
        u: u[1..].to_vec(),
        v: v[1..].to_vec(),
        total,
    }
}

/// Optimal cost of assigning `rows` to distinct members of `cols`.
fn sub_optimum(c: &[f64], m: usize, rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let sub: Vec<f64> = rows
        .iter()
        .flat_map(|&i| cols.iter().map(move |&j| c[i * m + j]))
        .collect();
    solve(&sub, rows.len(), cols.len()).total
}

/// Lexicographically smallest optimal assignment for an `n x m` cost
/// (`n <= m`).
pub fn assign_rect(c: &[f64], n: usize, m: usize) -> Assignment {
    if n == 0 {
        return Assignment {
            perm: Vec::new(),
            cost: 0.0,
        };
    }
    let best = solve(c, n, m);
    let scale = c.iter().fold(1.0f64, |a, &x| a.max(x.abs()));
    let tol = 1e-9 * scale * (n as f64);
    let mut perm = Vec::with_capacity(n);
    let mut taken = vec![false; m];
    let mut prefix = 0.0;
    for i in 0..n {
        let candidates: Vec<usize> = (0..m)
            .filter(|&j| !taken[j] && (c[i * m + j] - best.u[i] - best.v[j]).abs() <= tol)
            .collect();
        let mut chosen = None;
        if candidates.len() == 1 {
            chosen = Some(candidates[0]);
        } else {
            let rest: Vec<usize> = (i + 1..n).collect();
            for &j in &candidates {
                let cols: Vec<usize> = (0..m).filter(|&k| !taken[k] && k != j).collect();
                let total = prefix + c[i * m + j] + sub_optimum(c, m, &rest, &cols);
                if total <= best.total + tol {
                    chosen = Some(j);
                    break;
                }
            }
        }
        // numerical corner cases: fall back to the solver's own choice
        let j = chosen.unwrap_or_else(|| {
            if !taken[best.col_of_row[i]] {
                best.col_of_row[i]
            } else {
                (0..m).find(|&k| !taken[k]).unwrap()
            }
        });
        taken[j] = true;
        prefix += c[i * m + j];
        perm.push(j);
    }
    let cost = (0..n).map(|i| c[i * m + perm[i]]).sum();
    Assignment { perm, cost }
}

/// Minimum-cost perfect matching on a square, finite cost matrix.
pub fn hungarian(cost: &Tensor) -> Result<Assignment> {
    let (n, m) = cost.dims2()?;
    if n != m {
        return Err(Error::shape(
            "hungarian",
            format!("cost matrix is {n}x{m}, expected square"),
        ));
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite { op: "hungarian" });
    }
    Ok(assign_rect(cost.data(), n, m))
}

/// Assignment of `n` rows into `m >= n` columns by padding the matrix to
/// square with a constant larger than every entry.
pub fn hungarian_padded(cost: &Tensor) -> Result<Assignment> {
    let (n, m) = cost.dims2()?;
    if n > m {
        return Err(Error::Invalid(format!(
            "{n} targets but only {m} predictions"
        )));
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite { op: "hungarian" });
    }
    if n == m {
        return hungarian(cost);
    }
    let pad = cost.data().iter().fold(0.0f64, |a, &x| a.max(x.abs())) * 2.0 + 1.0;
    let mut data = cost.data().to_vec();
    data.resize(m * m, pad);
    let a = assign_rect(&data, m, m);
    let perm = a.perm[..n].to_vec();
    let cost_sum = (0..n).map(|i| cost.data()[i * m + perm[i]]).sum();
    Ok(Assignment {
        perm,
        cost: cost_sum,
    })
}

/// Exhaustive search; the first optimum in lexicographic order wins.
pub fn brute_force(cost: &Tensor) -> Assignment {
    let (n, m) = cost.dims2().expect("matrix");
    let mut best = Assignment {
        perm: Vec::new(),
        cost: f64::INFINITY,
    };
    let mut perm = Vec::with_capacity(n);
    let mut used = vec![false; m];
    fn rec(
        c: &Tensor,
        n: usize,
        perm: &mut Vec<usize>,
        used: &mut [bool],
        acc: f64,
        best: &mut Assignment,
    ) {
        let i = perm.len();
        if i == n {
            if acc < best.cost {
                best.cost = acc;
                best.perm = perm.clone();
            }
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                perm.push(j);
                rec(c, n, perm, used, acc + c.at(&[i, j]), best);
                perm.pop();
                used[j] = false;
            }
        }
    }
    rec(cost, n, &mut perm, &mut used, 0.0, &mut best);
    // recompute in row order so the sum matches `hungarian`
    best.cost = (0..n).map(|i| cost.at(&[i, best.perm[i]])).sum();
    best
}
