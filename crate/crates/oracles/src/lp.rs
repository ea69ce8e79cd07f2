//! Dense two-phase simplex with Bland's rule.

const EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub objective: f64,
    pub x: Vec<f64>,
}

struct Tableau {
    /// `rows x (cols + 1)`, last column is the right-hand side.
    t: Vec<Vec<f64>>,
    basis: Vec<usize>,
    cols: usize,
}

impl Tableau {
    fn pivot(&mut self, r: usize, c: usize) {
        let p = self.t[r][c];
        for v in self.t[r].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.t[r].clone();
        for (i, row) in self.t.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[c];
            if f.abs() > 0.0 {
                for (v, pv) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
            }
        }
        self.basis[r] = c;
    }

    /// Minimizes `cost . x` over the columns allowed by `usable`.
    /// Returns `None` when unbounded.
    fn minimize(&mut self, cost: &[f64], usable: &dyn Fn(usize) -> bool) -> Option<()> {
        let rhs = self.cols;
        loop {
            // Reduced costs from scratch each iteration. Slow but simple.
            let entering = (0..self.cols).filter(|&c| usable(c)).find(|&c| {
                let z: f64 = self.basis.iter().zip(&self.t).map(|(&b, row)| cost[b] * row[c]).sum();
                cost[c] - z < -EPS
            });
            let Some(c) = entering else { return Some(()) };
            let mut best: Option<(f64, usize)> = None;
            for (r, row) in self.t.iter().enumerate() {
                if row[c] > EPS {
                    let ratio = row[rhs] / row[c];
                    let better = match best {
                        None => true,
                        Some((b, br)) => ratio < b - EPS || (ratio <= b + EPS && self.basis[r] < self.basis[br]),
                    };
                    if better {
                        best = Some((ratio, r));
                    }
                }
            }
            let (_, r) = best?;
            self.pivot(r, c);
        }
    }
}

/// `min c.x` subject to `A x = b`, `x >= 0`. `None` if infeasible or unbounded.
pub fn solve_standard(a: &[Vec<f64>], b: &[f64], c: &[f64]) -> Option<LpSolution> {
    let rows = a.len();
    let n = c.len();
    let cols = n + rows;
    let mut t = Vec::with_capacity(rows);
    for (i, (ai, &bi)) in a.iter().zip(b).enumerate() {
        let sign = if bi < 0.0 { -1.0 } else { 1.0 };
        let mut row = vec![0.0; cols + 1];
        for (k, v) in ai.iter().enumerate() {
            row[k] = sign * v;
        }
        row[n + i] = 1.0;
        row[cols] = sign * bi;
        t.push(row);
    }
    let mut tab = Tableau {
        t,
        basis: (n..cols).collect(),
        cols,
    };

    let phase1: Vec<f64> = (0..cols).map(|k| if k >= n { 1.0 } else { 0.0 }).collect();
    tab.minimize(&phase1, &|_| true)?;
    let infeasibility: f64 = tab
        .basis
        .iter()
        .zip(&tab.t)
        .filter(|(&bv, _)| bv >= n)
        .map(|(_, row)| row[cols])
        .sum();
    if infeasibility > 1e-9 {
        return None;
    }
    // Drive zero-level artificials out of the basis; rows with no real
    // column left are redundant and dropped.
    let mut r = 0;
    while r < tab.t.len() {
        if tab.basis[r] >= n {
            match (0..n).find(|&k| tab.t[r][k].abs() > 1e-9) {
                Some(k) => tab.pivot(r, k),
                None => {
                    tab.t.remove(r);
                    tab.basis.remove(r);
                    continue;
                }
            }
        }
        r += 1;
    }

    let mut phase2 = c.to_vec();
    phase2.resize(cols, 0.0);
    tab.minimize(&phase2, &|k| k < n)?;
    let mut x = vec![0.0; n];
    for (&bv, row) in tab.basis.iter().zip(&tab.t) {
        if bv < n {
            x[bv] = row[cols];
        }
    }
    let objective = x.iter().zip(c).map(|(xi, ci)| xi * ci).sum();
    Some(LpSolution { objective, x })
}

/// Transportation problem: row sums `alpha`, column sums `beta`, dense `cost[i][j]`.
/// The returned `x` is row-major `n x m`.
pub fn transport(alpha: &[f64], beta: &[f64], cost: &[Vec<f64>]) -> Option<LpSolution> {
    let (n, m) = (alpha.len(), beta.len());
    let mut a = Vec::with_capacity(n + m);
    for i in 0..n {
        let mut row = vec![0.0; n * m];
        for j in 0..m {
            row[i * m + j] = 1.0;
        }
        a.push(row);
    }
    for j in 0..m {
        let mut row = vec![0.0; n * m];
        for i in 0..n {
            row[i * m + j] = 1.0;
        }
        a.push(row);
    }
    let b: Vec<f64> = alpha.iter().chain(beta).copied().collect();
    let c: Vec<f64> = cost.iter().flatten().copied().collect();
    solve_standard(&a, &b, &c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textbook_lp() {
        // min -x - y  s.t. x + 2y + s1 = 4, 3x + y + s2 = 6
        let a = vec![vec![1.0, 2.0, 1.0, 0.0], vec![3.0, 1.0, 0.0, 1.0]];
        let sol = solve_standard(&a, &[4.0, 6.0], &[-1.0, -1.0, 0.0, 0.0]).unwrap();
        assert!((sol.objective + 2.8).abs() < 1e-12);
        assert!((sol.x[0] - 1.6).abs() < 1e-12 && (sol.x[1] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn infeasible_lp() {
        let a = vec![vec![1.0, 1.0]];
        assert!(solve_standard(&a, &[-1.0], &[1.0, 1.0]).is_none());
    }

    #[test]
    fn small_transport() {
        let cost = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let sol = transport(&[0.5, 0.5], &[0.5, 0.5], &cost).unwrap();
        assert!(sol.objective.abs() < 1e-12);
        let cost = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![4.0, 9.0]];
        let sol = transport(&[0.3, 0.3, 0.4], &[0.5, 0.5], &cost).unwrap();
        // row 2 ships to column 0, row 1 overflows 0.2 into column 1.
        assert!((sol.objective - 1.8).abs() < 1e-12);
    }
}
