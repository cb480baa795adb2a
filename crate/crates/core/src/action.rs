//! Discrete action F(P) = Σ_i Δt Φ(P_{t_i, ṫ_i}) and its gradient with
//! respect to interior path nodes.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{MfaError, Result};
use crate::model::{statistic_at_interval, DiscreteStatistic, PathEnsemble, TimeGrid};
use crate::potentials::{Model, PotentialSpec};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActionValue {
    pub total: f64,
    /// Δt·Φ on each interval.
    pub per_interval: Vec<f64>,
    pub kinetic: f64,
    pub interaction: f64,
}

pub fn phi(spec_psi: &PotentialSpec, spec_u: &PotentialSpec, f: &DiscreteStatistic) -> Result<f64> {
    let model = Model::new(spec_psi, spec_u, f.dim())?;
    Ok(model.phi(f))
}

pub fn action(
    ens: &PathEnsemble,
    spec_psi: &PotentialSpec,
    spec_u: &PotentialSpec,
) -> Result<ActionValue> {
    let model = Model::new(spec_psi, spec_u, ens.dim())?;
    action_with(&model, ens)
}

pub fn action_with(model: &Model, ens: &PathEnsemble) -> Result<ActionValue> {
    if model.dim() != ens.dim() {
        return Err(MfaError::DimensionMismatch {
            expected: model.dim(),
            got: ens.dim(),
        });
    }
    let grid = ens.grid();
    let dt = grid.dt();
    let parts: Vec<(f64, f64)> = (0..grid.steps)
        .into_par_iter()
        .map(|i| {
            let f = statistic_at_interval(ens, i).expect("interval index in range");
            let (a, b) = model.phi_split(&f);
            (dt * a, dt * b)
        })
        .collect();
    let per_interval: Vec<f64> = parts.iter().map(|(a, b)| a + b).collect();
    let kinetic = parts.iter().map(|p| p.0).sum();
    let interaction = parts.iter().map(|p| p.1).sum();
    let total = per_interval.iter().sum();
    if !f64::is_finite(total) {
        return Err(MfaError::NonFinite("action".into()));
    }
    Ok(ActionValue {
        total,
        per_interval,
        kinetic,
        interaction,
    })
}

/// Node positions of an ensemble stored as one flat vector indexed
/// `[(k·(M+1) + i)·d + c]`.
#[derive(Debug, Clone)]
pub(crate) struct FlatPaths<'a> {
    pub weights: &'a [f64],
    pub grid: TimeGrid,
    pub dim: usize,
}

impl FlatPaths<'_> {
    pub fn nodes(&self) -> usize {
        self.grid.steps + 1
    }

    #[inline]
    pub fn at<'b>(&self, z: &'b [f64], k: usize, i: usize) -> &'b [f64] {
        let o = (k * self.nodes() + i) * self.dim;
        &z[o..o + self.dim]
    }

    /// Positions and velocities of interval `i`.
    pub fn interval(&self, z: &[f64], i: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let dt = self.grid.dt();
        let n = self.weights.len();
        let mut xs = Vec::with_capacity(n);
        let mut vs = Vec::with_capacity(n);
        for k in 0..n {
            let a = self.at(z, k, i);
            let b = self.at(z, k, i + 1);
            xs.push(a.to_vec());
            vs.push(a.iter().zip(b).map(|(p, q)| (q - p) / dt).collect());
        }
        (xs, vs)
    }
}

pub(crate) fn flatten(ens: &PathEnsemble) -> Vec<f64> {
    ens.paths()
        .iter()
        .flat_map(|p| p.iter().flat_map(|n| n.iter().copied()))
        .collect()
}

pub(crate) fn unflatten(z: &[f64], n: usize, nodes: usize, d: usize) -> Vec<Vec<Vec<f64>>> {
    (0..n)
        .map(|k| {
            (0..nodes)
                .map(|i| z[(k * nodes + i) * d..(k * nodes + i + 1) * d].to_vec())
                .collect()
        })
        .collect()
}

/// Per-interval Lagrangian gradients (∇_xL[f_i], ∇_vL[f_i]) at every atom of f_i.
pub(crate) fn interval_grads(
    model: &Model,
    fp: &FlatPaths,
    z: &[f64],
) -> Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (0..fp.grid.steps)
        .into_par_iter()
        .map(|i| {
            let (xs, vs) = fp.interval(z, i);
            model.lagrangian_grads_at_atoms(&xs, &vs, fp.weights)
        })
        .collect()
}

/// Action value and its gradient with respect to every node (endpoint
/// entries are left at zero).
pub(crate) fn value_and_grad(model: &Model, fp: &FlatPaths, z: &[f64], grad: &mut [f64]) -> f64 {
    let dt = fp.grid.dt();
    let n = fp.weights.len();
    let d = fp.dim;
    let m = fp.grid.steps;
    let per: Vec<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> = (0..m)
        .into_par_iter()
        .map(|i| {
            let (xs, vs) = fp.interval(z, i);
            let value = phi_atoms(model, &xs, &vs, fp.weights);
            let (gx, gv) = model.lagrangian_grads_at_atoms(&xs, &vs, fp.weights);
            (value, gx, gv)
        })
        .collect();
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut total = 0.0;
    for (i, (value, gx, gv)) in per.iter().enumerate() {
        total += dt * value;
        for k in 0..n {
            let w = fp.weights[k];
            let o0 = (k * (m + 1) + i) * d;
            let o1 = o0 + d;
            for c in 0..d {
                // ∂Φ_i/∂z_k = w_k∇L[f_i](z_k); Φ_i sees x^i directly and through v^i.
                if i > 0 {
                    grad[o0 + c] += dt * w * gx[k][c] - w * gv[k][c];
                }
                if i + 1 < m {
                    grad[o1 + c] += w * gv[k][c];
                }
            }
        }
    }
    total
}

pub(crate) fn phi_atoms(model: &Model, xs: &[Vec<f64>], vs: &[Vec<f64>], w: &[f64]) -> f64 {
    let (a, b) = model.phi_parts(xs.len(), |k| (&xs[k], &vs[k]), w);
    a + b
}

/// Gradient of the discrete action with respect to each interior node,
/// indexed `[path][node − 1][component]`.
pub fn action_gradient(
    ens: &PathEnsemble,
    spec_psi: &PotentialSpec,
    spec_u: &PotentialSpec,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let model = Model::new(spec_psi, spec_u, ens.dim())?;
    action_gradient_with(&model, ens)
}

pub fn action_gradient_with(model: &Model, ens: &PathEnsemble) -> Result<Vec<Vec<Vec<f64>>>> {
    model.require_smooth()?;
    let fp = FlatPaths {
        weights: ens.weights(),
        grid: ens.grid(),
        dim: ens.dim(),
    };
    let z = flatten(ens);
    let mut g = vec![0.0; z.len()];
    value_and_grad(model, &fp, &z, &mut g);
    let m = ens.grid().steps;
    let full = unflatten(&g, ens.len(), m + 1, ens.dim());
    Ok(full.into_iter().map(|p| p[1..m].to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EndpointCoupling;

    fn kinetic() -> PotentialSpec {
        PotentialSpec::quadratic_kinetic()
    }

    #[test]
    fn phi_examples() {
        let f = DiscreteStatistic::from_atoms(&[(vec![0.0], vec![3.0], 1.0)]).unwrap();
        assert_eq!(phi(&kinetic(), &PotentialSpec::zero(), &f).unwrap(), 4.5);
        let vp = PotentialSpec::variance_penalty();
        for v in [1.0, -1.0] {
            let f = DiscreteStatistic::from_atoms(&[(vec![0.0], vec![v], 1.0)]).unwrap();
            assert_eq!(phi(&vp, &PotentialSpec::zero(), &f).unwrap(), 0.0);
        }
        let g = DiscreteStatistic::from_atoms(&[
            (vec![0.0], vec![1.0], 0.5),
            (vec![0.0], vec![-1.0], 0.5),
        ])
        .unwrap();
        assert_eq!(phi(&vp, &PotentialSpec::zero(), &g).unwrap(), 1.0);
    }

    #[test]
    fn action_examples() {
        let grid = TimeGrid::new(1.0, 7).unwrap();
        let c = EndpointCoupling::uniform(vec![(vec![0.0], vec![1.0])]).unwrap();
        let ens = PathEnsemble::straight(&c, grid).unwrap();
        let a = action(&ens, &kinetic(), &PotentialSpec::zero()).unwrap();
        assert!((a.total - 0.5).abs() < 1e-14);

        let grid = TimeGrid::new(1.0, 2).unwrap();
        let ens = PathEnsemble::new(grid, vec![vec![vec![0.0], vec![1.0], vec![0.0]]], vec![1.0])
            .unwrap();
        assert_eq!(
            action(&ens, &kinetic(), &PotentialSpec::zero())
                .unwrap()
                .total,
            2.0
        );

        let grid = TimeGrid::new(1.0, 4).unwrap();
        let c = EndpointCoupling::uniform(vec![(vec![0.0], vec![0.0]), (vec![1.0], vec![1.0])])
            .unwrap();
        let ens = PathEnsemble::straight(&c, grid).unwrap();
        let a = action(&ens, &kinetic(), &PotentialSpec::quadratic_position(50.0)).unwrap();
        assert!((a.total - 12.5).abs() < 1e-12);
        assert!((a.total - a.per_interval.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn straight_line_is_stationary() {
        let grid = TimeGrid::new(2.0, 9).unwrap();
        let c = EndpointCoupling::uniform(vec![(vec![0.0, 1.0], vec![3.0, -1.0])]).unwrap();
        let ens = PathEnsemble::straight(&c, grid).unwrap();
        let g = action_gradient(&ens, &kinetic(), &PotentialSpec::zero()).unwrap();
        for node in &g[0] {
            for c in node {
                assert!(c.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_smooth_rejected() {
        let grid = TimeGrid::new(1.0, 3).unwrap();
        let c = EndpointCoupling::uniform(vec![(vec![0.0], vec![1.0])]).unwrap();
        let ens = PathEnsemble::straight(&c, grid).unwrap();
        assert!(matches!(
            action_gradient(&ens, &PotentialSpec::two_well(), &PotentialSpec::zero()),
            Err(MfaError::NonSmooth(_))
        ));
    }
}
