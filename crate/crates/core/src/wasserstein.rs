//! Exact W_p between finite measures via the transportation simplex.

use std::collections::VecDeque;

use serde::Serialize;

use crate::error::{MfaError, Result};
use crate::model::{DiscreteStatistic, PhasePoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Cost |x − x′|^p + |v − v′|^p.
    Phase,
    /// Cost |x − x′|^p.
    PositionOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransportPlan {
    pub rows: usize,
    pub cols: usize,
    /// Nonzero entries (i, j, mass) in row-major order.
    pub entries: Vec<(usize, usize, f64)>,
    /// Σ γ_ij c_ij, before taking the 1/p root.
    pub cost: f64,
}

impl TransportPlan {
    pub fn dense(&self) -> Vec<Vec<f64>> {
        let mut g = vec![vec![0.0; self.cols]; self.rows];
        for &(i, j, m) in &self.entries {
            g[i][j] += m;
        }
        g
    }
}

fn norm_pow(a: &[f64], b: &[f64], p: f64) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    if p == 2.0 {
        s
    } else {
        s.sqrt()
    }
}

pub fn point_cost(a: &PhasePoint, b: &PhasePoint, p: f64, metric: Metric) -> f64 {
    match metric {
        Metric::Phase => norm_pow(&a.x, &b.x, p) + norm_pow(&a.v, &b.v, p),
        Metric::PositionOnly => norm_pow(&a.x, &b.x, p),
    }
}

fn root(value: f64, p: f64) -> f64 {
    let v = value.max(0.0);
    if p == 2.0 {
        v.sqrt()
    } else {
        v
    }
}

fn check_args(f: &DiscreteStatistic, g: &DiscreteStatistic, p: f64) -> Result<()> {
    if f.dim() != g.dim() {
        return Err(MfaError::DimensionMismatch {
            expected: f.dim(),
            got: g.dim(),
        });
    }
    if p != 1.0 && p != 2.0 {
        return Err(MfaError::InvalidInput(format!("p must be 1 or 2, got {p}")));
    }
    Ok(())
}

/// W_p(f, g) and an optimal plan.
pub fn wp(
    f: &DiscreteStatistic,
    g: &DiscreteStatistic,
    p: f64,
    metric: Metric,
) -> Result<(f64, TransportPlan)> {
    check_args(f, g, p)?;
    let cost: Vec<Vec<f64>> = f
        .points()
        .iter()
        .map(|a| {
            g.points()
                .iter()
                .map(|b| point_cost(a, b, p, metric))
                .collect()
        })
        .collect();
    let plan = transport(f.weights(), g.weights(), &cost)?;
    Ok((root(plan.cost, p), plan))
}

/// Brute force over all assignments for equal-size, uniformly weighted
/// measures.
pub fn wp_bruteforce_equalweight(
    f: &DiscreteStatistic,
    g: &DiscreteStatistic,
    p: f64,
) -> Result<f64> {
    check_args(f, g, p)?;
    let n = f.len();
    if n != g.len() {
        return Err(MfaError::InvalidInput(
            "brute force needs equal atom counts".into(),
        ));
    }
    if n > 8 {
        return Err(MfaError::GuardExceeded(format!(
            "brute force limited to 8 atoms, got {n}"
        )));
    }
    let uniform = |w: &[f64]| w.iter().all(|&x| x == w[0]);
    if !uniform(f.weights()) || !uniform(g.weights()) {
        return Err(MfaError::InvalidInput(
            "brute force needs uniform weights".into(),
        ));
    }
    let w = f.weights();
    let cost: Vec<Vec<f64>> = f
        .points()
        .iter()
        .map(|a| {
            g.points()
                .iter()
                .map(|b| point_cost(a, b, p, Metric::Phase))
                .collect()
        })
        .collect();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    loop {
        let mut s = 0.0;
        for j in 0..n {
            s += w[j] * cost[j][perm[j]];
        }
        if s < best {
            best = s;
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(root(best, p))
}

fn next_permutation(a: &mut [usize]) -> bool {
    let n = a.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && a[i - 1] >= a[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while a[j] <= a[i - 1] {
        j -= 1;
    }
    a.swap(i - 1, j);
    a[i..].reverse();
    true
}

const BLAND_AFTER: usize = 50;

/// Solves min Σ γ_ij c_ij over couplings of `a` and `b` with the
/// transportation simplex. When both marginals are uniform the flows are
/// carried as integers so that vertex plans carry the input weights bit for
/// bit.
pub fn transport(a: &[f64], b: &[f64], cost: &[Vec<f64>]) -> Result<TransportPlan> {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 || cost.len() != n || cost.iter().any(|r| r.len() != m) {
        return Err(MfaError::InvalidInput("transport: shape mismatch".into()));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(MfaError::NonFinite("transport cost".into()));
    }
    let uniform = |w: &[f64]| w.iter().all(|&x| x == w[0]);
    let integral = uniform(a) && uniform(b) && n * m < (1 << 40);
    let (supply, demand): (Vec<f64>, Vec<f64>) = if integral {
        (vec![m as f64; n], vec![n as f64; m])
    } else {
        (a.to_vec(), b.to_vec())
    };

    // Northwest corner start; every step advances exactly one index so the
    // basis has n + m − 1 cells even under degeneracy.
    let mut basis: Vec<(usize, usize)> = Vec::with_capacity(n + m - 1);
    let mut flow: Vec<f64> = Vec::with_capacity(n + m - 1);
    {
        let mut s = supply.clone();
        let mut d = demand.clone();
        let (mut i, mut j) = (0, 0);
        loop {
            let q = if i == n - 1 && j == m - 1 {
                s[i].max(0.0)
            } else {
                s[i].min(d[j]).max(0.0)
            };
            basis.push((i, j));
            flow.push(q);
            s[i] -= q;
            d[j] -= q;
            if i == n - 1 && j == m - 1 {
                break;
            }
            if j == m - 1 || (i < n - 1 && s[i] <= d[j]) {
                i += 1;
            } else {
                j += 1;
            }
        }
    }

    let scale = cost
        .iter()
        .flatten()
        .fold(0.0f64, |acc, c| acc.max(c.abs()))
        .max(1e-300);
    let eps = 1e-13 * scale;
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; m];
    let mut degenerate_run = 0usize;
    let max_pivots = 50 * (n + m) * (n + m) + 1000;
    let mut pivots = 0usize;
    loop {
        compute_duals(n, m, &basis, cost, &mut u, &mut v);
        let bland = degenerate_run >= BLAND_AFTER;
        let mut enter: Option<(usize, usize)> = None;
        let mut best = -eps;
        'scan: for i in 0..n {
            for j in 0..m {
                let r = cost[i][j] - u[i] - v[j];
                if r < best {
                    enter = Some((i, j));
                    if bland {
                        break 'scan;
                    }
                    best = r;
                }
            }
        }
        let Some((ei, ej)) = enter else { break };
        pivots += 1;
        if pivots > max_pivots {
            return Err(MfaError::NonConvergence(
                "transportation simplex pivot limit".into(),
            ));
        }
        let path = tree_path(n, m, &basis, ei, ej);
        // path[t] are basis indices on the tree path from row ei to column ej;
        // signs alternate starting with − at the cell touching column ej.
        let k = path.len();
        let mut theta = f64::INFINITY;
        let mut leave = usize::MAX;
        for (t, &bi) in path.iter().enumerate() {
            if (k - 1 - t) % 2 == 0 {
                let fl = flow[bi];
                let better =
                    leave == usize::MAX || fl < theta || (fl == theta && basis[bi] < basis[leave]);
                if better {
                    theta = fl;
                    leave = bi;
                }
            }
        }
        if theta <= 0.0 {
            degenerate_run += 1;
        } else {
            degenerate_run = 0;
        }
        for (t, &bi) in path.iter().enumerate() {
            if (k - 1 - t) % 2 == 0 {
                flow[bi] -= theta;
            } else {
                flow[bi] += theta;
            }
        }
        basis[leave] = (ei, ej);
        flow[leave] = theta;
    }

    let mut entries: Vec<(usize, usize, f64)> = basis
        .iter()
        .zip(&flow)
        .filter(|(_, &f)| f > 0.0)
        .map(|(&(i, j), &f)| {
            let mass = if integral { a[i] * (f / supply[i]) } else { f };
            (i, j, mass)
        })
        .collect();
    entries.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
    let mut total = 0.0;
    for &(i, j, g) in &entries {
        total += g * cost[i][j];
    }
    Ok(TransportPlan {
        rows: n,
        cols: m,
        entries,
        cost: total,
    })
}

fn adjacency(n: usize, m: usize, basis: &[(usize, usize)]) -> Vec<Vec<(usize, usize)>> {
    let mut adj = vec![Vec::new(); n + m];
    for (bi, &(i, j)) in basis.iter().enumerate() {
        adj[i].push((n + j, bi));
        adj[n + j].push((i, bi));
    }
    adj
}

fn compute_duals(
    n: usize,
    m: usize,
    basis: &[(usize, usize)],
    cost: &[Vec<f64>],
    u: &mut [f64],
    v: &mut [f64],
) {
    let adj = adjacency(n, m, basis);
    let mut seen = vec![false; n + m];
    let mut queue = VecDeque::new();
    u[0] = 0.0;
    seen[0] = true;
    queue.push_back(0);
    while let Some(node) = queue.pop_front() {
        for &(next, bi) in &adj[node] {
            if seen[next] {
                continue;
            }
            seen[next] = true;
            let (i, j) = basis[bi];
            if next >= n {
                v[j] = cost[i][j] - u[i];
            } else {
                u[i] = cost[i][j] - v[j];
            }
            queue.push_back(next);
        }
    }
}

/// Basis indices along the tree path from row `i` to column `j`.
fn tree_path(n: usize, m: usize, basis: &[(usize, usize)], i: usize, j: usize) -> Vec<usize> {
    let adj = adjacency(n, m, basis);
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; n + m];
    let mut seen = vec![false; n + m];
    let mut queue = VecDeque::new();
    seen[i] = true;
    queue.push_back(i);
    let target = n + j;
    while let Some(node) = queue.pop_front() {
        if node == target {
            break;
        }
        for &(next, bi) in &adj[node] {
            if !seen[next] {
                seen[next] = true;
                parent[next] = Some((node, bi));
                queue.push_back(next);
            }
        }
    }
    let mut path = Vec::new();
    let mut node = target;
    while let Some((prev, bi)) = parent[node] {
        path.push(bi);
        node = prev;
    }
    path.reverse();
    path
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stat(atoms: &[(f64, f64)]) -> DiscreteStatistic {
        DiscreteStatistic::uniform(
            atoms
                .iter()
                .map(|&(x, v)| PhasePoint::new(vec![x], vec![v]).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_is_zero() {
        let f = stat(&[(0.0, 1.0), (2.0, -1.0), (1.0, 0.5)]);
        let (d, plan) = wp(&f, &f, 2.0, Metric::Phase).unwrap();
        assert_eq!(d, 0.0);
        for &(i, j, _) in &plan.entries {
            assert_eq!(i, j);
        }
    }

    #[test]
    fn single_pair() {
        let f = stat(&[(0.0, 0.0)]);
        let g = stat(&[(0.0, 1.0)]);
        assert_eq!(wp(&f, &g, 2.0, Metric::Phase).unwrap().0, 1.0);
    }

    #[test]
    fn two_atoms_match_bruteforce() {
        let f = stat(&[(0.0, 0.0), (0.0, 2.0)]);
        let g = stat(&[(0.0, 1.0), (0.0, 3.0)]);
        let lp = wp(&f, &g, 2.0, Metric::Phase).unwrap().0;
        let bf = wp_bruteforce_equalweight(&f, &g, 2.0).unwrap();
        assert_eq!(lp, bf);
        assert_eq!(lp, 1.0);
    }

    #[test]
    fn unequal_weights_marginals() {
        let f = DiscreteStatistic::from_atoms(&[
            (vec![0.0], vec![0.0], 0.3),
            (vec![1.0], vec![0.0], 0.7),
        ])
        .unwrap();
        let g = DiscreteStatistic::from_atoms(&[
            (vec![0.5], vec![0.0], 0.2),
            (vec![2.0], vec![0.0], 0.5),
            (vec![-1.0], vec![0.0], 0.3),
        ])
        .unwrap();
        let (_, plan) = wp(&f, &g, 1.0, Metric::PositionOnly).unwrap();
        let dense = plan.dense();
        for (i, w) in f.weights().iter().enumerate() {
            assert!((dense[i].iter().sum::<f64>() - w).abs() < 1e-12);
        }
        for (j, w) in g.weights().iter().enumerate() {
            assert!((dense.iter().map(|r| r[j]).sum::<f64>() - w).abs() < 1e-12);
        }
        // 1-D W₁ equals the L¹ distance of CDFs.
        let want = 0.3 * 1.0 + 0.2 * 0.5 + 0.5 * 1.0 + 0.0;
        assert!((plan.cost - want).abs() < 1e-12, "{} vs {want}", plan.cost);
    }

    #[test]
    fn guard() {
        let pts: Vec<(f64, f64)> = (0..9).map(|i| (i as f64, 0.0)).collect();
        let f = stat(&pts);
        assert!(matches!(
            wp_bruteforce_equalweight(&f, &f, 2.0),
            Err(MfaError::GuardExceeded(_))
        ));
    }
}
