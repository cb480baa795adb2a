//! Phase-space and path-space data model.

use serde::{Deserialize, Serialize};

use crate::error::{MfaError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

impl PhasePoint {
    pub fn new(x: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if x.is_empty() {
            return Err(MfaError::InvalidInput(
                "dimension must be at least 1".into(),
            ));
        }
        if x.len() != v.len() {
            return Err(MfaError::DimensionMismatch {
                expected: x.len(),
                got: v.len(),
            });
        }
        Ok(PhasePoint { x, v })
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

fn normalize(weights: &[f64]) -> Result<Vec<f64>> {
    if weights.is_empty() {
        return Err(MfaError::InvalidInput("empty weight list".into()));
    }
    for &w in weights {
        if !w.is_finite() || w < 0.0 {
            return Err(MfaError::InvalidInput(format!("invalid weight {w}")));
        }
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(MfaError::InvalidInput("weights sum to zero".into()));
    }
    if total == 1.0 {
        return Ok(weights.to_vec());
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// Weighted finite point cloud in phase space.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscreteStatistic {
    points: Vec<PhasePoint>,
    weights: Vec<f64>,
}

impl DiscreteStatistic {
    /// Weights are renormalized to sum to one.
    pub fn new(points: Vec<PhasePoint>, weights: Vec<f64>) -> Result<Self> {
        if points.len() != weights.len() {
            return Err(MfaError::InvalidInput(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        let weights = normalize(&weights)?;
        let d = points[0].dim();
        for p in &points {
            if p.dim() == 0 || p.x.len() != p.v.len() {
                return Err(MfaError::InvalidInput("malformed phase point".into()));
            }
            if p.dim() != d {
                return Err(MfaError::DimensionMismatch {
                    expected: d,
                    got: p.dim(),
                });
            }
            if p.x.iter().chain(p.v.iter()).any(|c| !c.is_finite()) {
                return Err(MfaError::NonFinite("phase point coordinate".into()));
            }
        }
        Ok(DiscreteStatistic { points, weights })
    }

    /// Equal weights.
    pub fn uniform(points: Vec<PhasePoint>) -> Result<Self> {
        let n = points.len();
        Self::new(points, vec![1.0; n])
    }

    /// Convenience constructor from `(x, v, weight)` triples.
    pub fn from_atoms(atoms: &[(Vec<f64>, Vec<f64>, f64)]) -> Result<Self> {
        let mut pts = Vec::with_capacity(atoms.len());
        let mut ws = Vec::with_capacity(atoms.len());
        for (x, v, w) in atoms {
            pts.push(PhasePoint::new(x.clone(), v.clone())?);
            ws.push(*w);
        }
        Self::new(pts, ws)
    }

    pub fn points(&self) -> &[PhasePoint] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].dim()
    }

    pub fn mean_velocity(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (p, w) in self.points.iter().zip(&self.weights) {
            for (mc, vc) in m.iter_mut().zip(&p.v) {
                *mc += w * vc;
            }
        }
        m
    }

    /// Position marginal as sorted `(x, aggregated weight)` pairs.
    pub fn x_marginal(&self) -> Vec<(Vec<f64>, f64)> {
        let mut out: Vec<(Vec<f64>, f64)> = Vec::new();
        for (p, w) in self.points.iter().zip(&self.weights) {
            if let Some(e) = out.iter_mut().find(|(x, _)| *x == p.x) {
                e.1 += w;
            } else {
                out.push((p.x.clone(), *w));
            }
        }
        out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(MfaError::InvalidInput(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(MfaError::InvalidInput(
                "time grid needs at least one step".into(),
            ));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        self.horizon * i as f64 / self.steps as f64
    }
}

/// Weighted piecewise-linear trajectories on a shared uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathEnsemble {
    grid: TimeGrid,
    paths: Vec<Vec<Vec<f64>>>,
    weights: Vec<f64>,
}

impl PathEnsemble {
    /// `paths[k][i]` is the position of path `k` at node `i`.
    pub fn new(grid: TimeGrid, paths: Vec<Vec<Vec<f64>>>, weights: Vec<f64>) -> Result<Self> {
        if paths.len() != weights.len() {
            return Err(MfaError::InvalidInput("path/weight count mismatch".into()));
        }
        let weights = normalize(&weights)?;
        let d = paths[0].first().map(|n| n.len()).unwrap_or(0);
        if d == 0 {
            return Err(MfaError::InvalidInput(
                "dimension must be at least 1".into(),
            ));
        }
        for path in &paths {
            if path.len() != grid.steps + 1 {
                return Err(MfaError::InvalidInput(format!(
                    "path has {} nodes, grid needs {}",
                    path.len(),
                    grid.steps + 1
                )));
            }
            for node in path {
                if node.len() != d {
                    return Err(MfaError::DimensionMismatch {
                        expected: d,
                        got: node.len(),
                    });
                }
                if node.iter().any(|c| !c.is_finite()) {
                    return Err(MfaError::NonFinite("path node".into()));
                }
            }
        }
        Ok(PathEnsemble {
            grid,
            paths,
            weights,
        })
    }

    /// Straight lines between coupled endpoints. Node 0 and node M are copied
    /// bit-for-bit from the coupling.
    pub fn straight(coupling: &EndpointCoupling, grid: TimeGrid) -> Result<Self> {
        let m = grid.steps;
        let paths = coupling
            .pairs()
            .iter()
            .map(|(a, b)| {
                (0..=m)
                    .map(|i| {
                        if i == 0 {
                            a.clone()
                        } else if i == m {
                            b.clone()
                        } else {
                            let s = i as f64 / m as f64;
                            a.iter().zip(b).map(|(p, q)| p + s * (q - p)).collect()
                        }
                    })
                    .collect()
            })
            .collect();
        Self::new(grid, paths, coupling.weights().to_vec())
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn paths(&self) -> &[Vec<Vec<f64>>] {
        &self.paths
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.paths[0][0].len()
    }

    /// Velocity of path `k` on interval `i`.
    pub fn velocity(&self, k: usize, i: usize) -> Vec<f64> {
        let dt = self.grid.dt();
        let p = &self.paths[k];
        p[i + 1]
            .iter()
            .zip(&p[i])
            .map(|(b, a)| (b - a) / dt)
            .collect()
    }

    pub fn endpoints(&self) -> EndpointCoupling {
        let m = self.grid.steps;
        EndpointCoupling {
            pairs: self
                .paths
                .iter()
                .map(|p| (p[0].clone(), p[m].clone()))
                .collect(),
            weights: self.weights.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EndpointCoupling {
    pairs: Vec<(Vec<f64>, Vec<f64>)>,
    weights: Vec<f64>,
}

impl EndpointCoupling {
    pub fn new(pairs: Vec<(Vec<f64>, Vec<f64>)>, weights: Vec<f64>) -> Result<Self> {
        if pairs.len() != weights.len() {
            return Err(MfaError::InvalidInput("pair/weight count mismatch".into()));
        }
        let weights = normalize(&weights)?;
        let d = pairs[0].0.len();
        if d == 0 {
            return Err(MfaError::InvalidInput(
                "dimension must be at least 1".into(),
            ));
        }
        for (a, b) in &pairs {
            if a.len() != d || b.len() != d {
                return Err(MfaError::DimensionMismatch {
                    expected: d,
                    got: a.len().max(b.len()),
                });
            }
            if a.iter().chain(b).any(|c| !c.is_finite()) {
                return Err(MfaError::NonFinite("endpoint".into()));
            }
        }
        Ok(EndpointCoupling { pairs, weights })
    }

    pub fn uniform(pairs: Vec<(Vec<f64>, Vec<f64>)>) -> Result<Self> {
        let n = pairs.len();
        Self::new(pairs, vec![1.0; n])
    }

    pub fn pairs(&self) -> &[(Vec<f64>, Vec<f64>)] {
        &self.pairs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.pairs[0].0.len()
    }
}

/// Finitely supported Markov kernel in velocity, one row per source atom.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VelocityKernel {
    source: Vec<PhasePoint>,
    rows: Vec<Vec<(Vec<f64>, f64)>>,
}

impl VelocityKernel {
    pub fn new(source: Vec<PhasePoint>, rows: Vec<Vec<(Vec<f64>, f64)>>) -> Result<Self> {
        if source.len() != rows.len() {
            return Err(MfaError::KernelMismatch(format!(
                "{} source atoms but {} rows",
                source.len(),
                rows.len()
            )));
        }
        for (p, row) in source.iter().zip(&rows) {
            if row.is_empty() {
                return Err(MfaError::InvalidInput("empty kernel row".into()));
            }
            let mut total = 0.0;
            for (v, q) in row {
                if v.len() != p.dim() {
                    return Err(MfaError::DimensionMismatch {
                        expected: p.dim(),
                        got: v.len(),
                    });
                }
                if !(q.is_finite() && *q >= 0.0) {
                    return Err(MfaError::InvalidInput(format!(
                        "invalid kernel probability {q}"
                    )));
                }
                total += q;
            }
            if (total - 1.0).abs() > 1e-9 {
                return Err(MfaError::InvalidInput(format!(
                    "kernel row sums to {total}"
                )));
            }
        }
        Ok(VelocityKernel { source, rows })
    }

    /// The kernel `(x, v) -> δ_v` for every atom of `f`.
    pub fn identity(f: &DiscreteStatistic) -> Self {
        VelocityKernel {
            source: f.points().to_vec(),
            rows: f
                .points()
                .iter()
                .map(|p| vec![(p.v.clone(), 1.0)])
                .collect(),
        }
    }

    pub fn source(&self) -> &[PhasePoint] {
        &self.source
    }

    pub fn rows(&self) -> &[Vec<(Vec<f64>, f64)>] {
        &self.rows
    }

    pub fn row_mean(&self, a: usize) -> Vec<f64> {
        let d = self.source[a].dim();
        let mut m = vec![0.0; d];
        for (v, q) in &self.rows[a] {
            for c in 0..d {
                m[c] += q * v[c];
            }
        }
        m
    }
}

/// Velocity and position at the left node of interval `i`, weighted by path weights.
pub fn statistic_at_interval(ens: &PathEnsemble, i: usize) -> Result<DiscreteStatistic> {
    let m = ens.grid().steps;
    if i >= m {
        return Err(MfaError::IndexOutOfRange { index: i, len: m });
    }
    let points = (0..ens.len())
        .map(|k| PhasePoint {
            x: ens.paths()[k][i].clone(),
            v: ens.velocity(k, i),
        })
        .collect();
    DiscreteStatistic::new(points, ens.weights().to_vec())
}

pub fn apply_kernel(f: &DiscreteStatistic, k: &VelocityKernel) -> Result<DiscreteStatistic> {
    if k.source().len() != f.len() {
        return Err(MfaError::KernelMismatch(format!(
            "kernel has {} source atoms, statistic has {}",
            k.source().len(),
            f.len()
        )));
    }
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for (a, (p, w)) in f.points().iter().zip(f.weights()).enumerate() {
        if k.source()[a] != *p {
            return Err(MfaError::KernelMismatch(format!("source atom {a} differs")));
        }
        for (v, q) in &k.rows()[a] {
            points.push(PhasePoint {
                x: p.x.clone(),
                v: v.clone(),
            });
            weights.push(w * q);
        }
    }
    DiscreteStatistic::new(points, weights)
}

pub fn is_martingale(k: &VelocityKernel, tol: f64) -> bool {
    (0..k.source().len()).all(|a| {
        let m = k.row_mean(a);
        m.iter()
            .zip(&k.source()[a].v)
            .all(|(mc, vc)| (mc - vc).abs() <= tol)
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

/// Velocity moment `Σ w |v|^order`.
pub fn moment(f: &DiscreteStatistic, order: f64) -> f64 {
    f.points()
        .iter()
        .zip(f.weights())
        .map(|(p, w)| w * norm(&p.v).powf(order))
        .sum()
}

/// Position moment `Σ w |x|^order`.
pub fn position_moment(f: &DiscreteStatistic, order: f64) -> f64 {
    f.points()
        .iter()
        .zip(f.weights())
        .map(|(p, w)| w * norm(&p.x).powf(order))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn atom(x: f64, v: f64, w: f64) -> (Vec<f64>, Vec<f64>, f64) {
        (vec![x], vec![v], w)
    }

    #[test]
    fn interval_statistic_single_path() {
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let ens = PathEnsemble::new(grid, vec![vec![vec![0.0], vec![1.0]]], vec![1.0]).unwrap();
        let f = statistic_at_interval(&ens, 0).unwrap();
        assert_eq!(f.points()[0].x, vec![0.0]);
        assert_eq!(f.points()[0].v, vec![1.0]);
        assert_eq!(f.weights(), &[1.0]);
        assert!(matches!(
            statistic_at_interval(&ens, 1),
            Err(MfaError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn interval_statistic_two_paths() {
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let ens = PathEnsemble::new(
            grid,
            vec![vec![vec![0.0], vec![0.0]], vec![vec![0.0], vec![1.0]]],
            vec![1.0, 1.0],
        )
        .unwrap();
        let f = statistic_at_interval(&ens, 0).unwrap();
        assert_eq!(f.weights(), &[0.5, 0.5]);
        assert_eq!(f.points()[0].v, vec![0.0]);
        assert_eq!(f.points()[1].v, vec![1.0]);
    }

    #[test]
    fn kernel_split() {
        let f = DiscreteStatistic::from_atoms(&[atom(0.0, 1.0, 1.0)]).unwrap();
        let k = VelocityKernel::new(
            f.points().to_vec(),
            vec![vec![(vec![-1.0], 0.5), (vec![3.0], 0.5)]],
        )
        .unwrap();
        let g = apply_kernel(&f, &k).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.points()[0].v, vec![-1.0]);
        assert_eq!(g.points()[1].v, vec![3.0]);
        assert_eq!(g.weights(), &[0.5, 0.5]);
        assert!(is_martingale(&k, 1e-12));

        let shift = VelocityKernel::new(f.points().to_vec(), vec![vec![(vec![0.0], 1.0)]]).unwrap();
        assert!(!is_martingale(&shift, 1e-12));
    }

    #[test]
    fn identity_kernel_is_noop() {
        let f =
            DiscreteStatistic::from_atoms(&[atom(0.0, 1.0, 0.3), atom(2.0, -1.0, 0.7)]).unwrap();
        let id = VelocityKernel::identity(&f);
        assert_eq!(apply_kernel(&f, &id).unwrap(), f);
        assert!(is_martingale(&id, 0.0));
    }

    #[test]
    fn symmetric_split_is_martingale() {
        let f = DiscreteStatistic::from_atoms(&[atom(0.0, 0.0, 1.0)]).unwrap();
        let k = VelocityKernel::new(
            f.points().to_vec(),
            vec![vec![(vec![-1.0], 0.5), (vec![1.0], 0.5)]],
        )
        .unwrap();
        assert!(is_martingale(&k, 1e-15));
        let g = apply_kernel(&f, &k).unwrap();
        assert_eq!(g.x_marginal(), f.x_marginal());
    }

    #[test]
    fn kernel_mismatch_rejected() {
        let f = DiscreteStatistic::from_atoms(&[atom(0.0, 0.0, 1.0)]).unwrap();
        let g = DiscreteStatistic::from_atoms(&[atom(1.0, 0.0, 1.0)]).unwrap();
        let k = VelocityKernel::identity(&g);
        assert!(matches!(
            apply_kernel(&f, &k),
            Err(MfaError::KernelMismatch(_))
        ));
    }

    #[test]
    fn moments() {
        let f = DiscreteStatistic::from_atoms(&[atom(0.0, 0.0, 1.0)]).unwrap();
        assert_eq!(moment(&f, 2.0), 0.0);
        let f =
            DiscreteStatistic::from_atoms(&[atom(0.0, 1.0, 0.5), atom(0.0, -1.0, 0.5)]).unwrap();
        assert_eq!(moment(&f, 2.0), 1.0);
        let f = DiscreteStatistic::from_atoms(&[atom(0.0, 1.0, 0.5), atom(0.0, 3.0, 0.5)]).unwrap();
        assert_eq!(moment(&f, 2.0), 5.0);
        let f = DiscreteStatistic::from_atoms(&[atom(2.0, 1.0, 1.0)]).unwrap();
        assert_eq!(position_moment(&f, 2.0), 4.0);
    }

    #[test]
    fn weights_renormalized() {
        let f = DiscreteStatistic::from_atoms(&[atom(0.0, 0.0, 2.0), atom(1.0, 0.0, 6.0)]).unwrap();
        assert_eq!(f.weights(), &[0.25, 0.75]);
        assert!(DiscreteStatistic::from_atoms(&[atom(0.0, 0.0, -1.0)]).is_err());
    }

    #[test]
    fn straight_ensemble_keeps_endpoints() {
        let c = EndpointCoupling::uniform(vec![(vec![0.1, 0.2], vec![0.7, -0.3])]).unwrap();
        let ens = PathEnsemble::straight(&c, TimeGrid::new(1.0, 7).unwrap()).unwrap();
        assert_eq!(ens.paths()[0][0], vec![0.1, 0.2]);
        assert_eq!(ens.paths()[0][7], vec![0.7, -0.3]);
        assert_eq!(ens.endpoints(), c);
    }
}
