//! Minimization of the discrete action over interior path nodes, discrete
//! Euler-Lagrange residuals, and the N → ∞ self-convergence experiment.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action::{flatten, interval_grads, unflatten, value_and_grad, FlatPaths};
use crate::error::{MfaError, Result};
use crate::lbfgs::{minimize, LbfgsOptions, Termination};
use crate::model::{statistic_at_interval, EndpointCoupling, PathEnsemble, TimeGrid};
use crate::potentials::{Model, PotentialSpec};
use crate::wasserstein::{wp, Metric};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeOptions {
    pub gtol: f64,
    pub max_iter: usize,
    pub memory: usize,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        OptimizeOptions {
            gtol: 1e-8,
            max_iter: 20_000,
            memory: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizeReport {
    pub ensemble: PathEnsemble,
    pub initial_action: f64,
    pub final_action: f64,
    pub iterations: usize,
    /// ∞-norm of the interior-node gradient.
    pub grad_norm: f64,
    pub el_residual: f64,
    pub converged: bool,
    /// Not serialized, so that report files are reproducible byte for byte.
    #[serde(skip)]
    pub wall_time: Duration,
}

/// (C1) on a statistic: smallest eigenvalue of ∇_v∇_vL[f] over its atoms.
pub(crate) fn min_vv_eigenvalue(model: &Model, xs: &[Vec<f64>], vs: &[Vec<f64>], w: &[f64]) -> f64 {
    let d = model.dim();
    let mut lowest = f64::INFINITY;
    let mut dx = vec![0.0; d];
    let mut dv = vec![0.0; d];
    for k in 0..xs.len() {
        let mut h = model.psi_hess(&xs[k], &vs[k]);
        for j in 0..xs.len() {
            for c in 0..d {
                dx[c] = xs[k][c] - xs[j][c];
                dv[c] = vs[k][c] - vs[j][c];
            }
            h += model.u_hess(&dx, &dv) * w[j];
        }
        let vv = h.view((d, d), (d, d)).into_owned();
        lowest = lowest.min(vv.symmetric_eigen().eigenvalues.min());
    }
    lowest
}

pub fn optimize(
    coupling: &EndpointCoupling,
    grid: TimeGrid,
    spec_psi: &PotentialSpec,
    spec_u: &PotentialSpec,
    opts: &OptimizeOptions,
) -> Result<OptimizeReport> {
    let model = Model::new(spec_psi, spec_u, coupling.dim())?;
    optimize_with(&model, coupling, grid, opts)
}

pub fn optimize_with(
    model: &Model,
    coupling: &EndpointCoupling,
    grid: TimeGrid,
    opts: &OptimizeOptions,
) -> Result<OptimizeReport> {
    let start = Instant::now();
    model.require_smooth()?;
    if grid.steps < 2 {
        return Err(MfaError::InvalidInput(
            "optimization needs at least two time steps".into(),
        ));
    }
    if coupling.dim() != model.dim() {
        return Err(MfaError::DimensionMismatch {
            expected: model.dim(),
            got: coupling.dim(),
        });
    }
    let init = PathEnsemble::straight(coupling, grid)?;
    let fp = FlatPaths {
        weights: init.weights(),
        grid,
        dim: init.dim(),
    };
    let mut z = flatten(&init);
    for i in 0..grid.steps {
        let (xs, vs) = fp.interval(&z, i);
        let lowest = min_vv_eigenvalue(model, &xs, &vs, fp.weights);
        if !(lowest > 0.0) {
            return Err(MfaError::ConditionViolation(format!(
                "∇_v∇_v L is not positive definite on the initial ensemble (eigenvalue {lowest:e})"
            )));
        }
    }

    let n = init.len();
    let nodes = grid.steps + 1;
    let d = init.dim();
    let interior: Vec<usize> = (0..n)
        .flat_map(|k| {
            (1..grid.steps).flat_map(move |i| (0..d).map(move |c| (k * nodes + i) * d + c))
        })
        .collect();
    let x0: Vec<f64> = interior.iter().map(|&o| z[o]).collect();
    let mut full_grad = vec![0.0; z.len()];
    let mut work = z.clone();
    let lopts = LbfgsOptions {
        memory: opts.memory,
        gtol: opts.gtol,
        max_iter: opts.max_iter,
        ..Default::default()
    };
    let res = minimize(
        |x, g| {
            for (idx, &o) in interior.iter().enumerate() {
                work[o] = x[idx];
            }
            let value = value_and_grad(model, &fp, &work, &mut full_grad);
            for (idx, &o) in interior.iter().enumerate() {
                g[idx] = full_grad[o];
            }
            value
        },
        x0,
        &lopts,
    );
    for (idx, &o) in interior.iter().enumerate() {
        z[o] = res.x[idx];
    }
    let ensemble = PathEnsemble::new(grid, unflatten(&z, n, nodes, d), init.weights().to_vec())?;
    let el = el_residual_with(model, &ensemble)?;
    let report = OptimizeReport {
        ensemble,
        initial_action: res.initial_value,
        final_action: res.value,
        iterations: res.iterations,
        grad_norm: res.grad_inf,
        el_residual: el,
        converged: res.termination == Termination::Converged,
        wall_time: start.elapsed(),
    };
    match res.termination {
        Termination::NonFinite => Err(MfaError::NonFinite("action at the initial ensemble".into())),
        Termination::LineSearchFailure => Err(MfaError::LineSearchFailure {
            iterations: report.iterations,
            best_value: report.final_action,
            best: Box::new(report),
        }),
        _ => Ok(report),
    }
}

pub fn el_residual(
    ens: &PathEnsemble,
    spec_psi: &PotentialSpec,
    spec_u: &PotentialSpec,
) -> Result<f64> {
    let model = Model::new(spec_psi, spec_u, ens.dim())?;
    el_residual_with(&model, ens)
}

/// max_{k, 0<i<M} |(∇_vL[f_i](z_k^i) − ∇_vL[f_{i−1}](z_k^{i−1}))/Δt − ∇_xL[f_i](z_k^i)|.
pub fn el_residual_with(model: &Model, ens: &PathEnsemble) -> Result<f64> {
    model.require_smooth()?;
    let grid = ens.grid();
    let fp = FlatPaths {
        weights: ens.weights(),
        grid,
        dim: ens.dim(),
    };
    let z = flatten(ens);
    let grads = interval_grads(model, &fp, &z);
    let dt = grid.dt();
    let mut worst: f64 = 0.0;
    for i in 1..grid.steps {
        for k in 0..ens.len() {
            let (gx, gv) = (&grads[i].0[k], &grads[i].1[k]);
            let gv_prev = &grads[i - 1].1[k];
            let r: f64 = (0..fp.dim)
                .map(|c| ((gv[c] - gv_prev[c]) / dt - gx[c]).powi(2))
                .sum::<f64>()
                .sqrt();
            worst = worst.max(r);
        }
    }
    Ok(worst)
}

/// Total momentum Σ_k w_k ∇_vL[f_i](z_k^i) on every interval.
pub fn momentum(model: &Model, ens: &PathEnsemble) -> Vec<Vec<f64>> {
    let fp = FlatPaths {
        weights: ens.weights(),
        grid: ens.grid(),
        dim: ens.dim(),
    };
    let z = flatten(ens);
    interval_grads(model, &fp, &z)
        .into_iter()
        .map(|(_, gv)| {
            let mut p = vec![0.0; fp.dim];
            for (k, g) in gv.iter().enumerate() {
                for c in 0..fp.dim {
                    p[c] += fp.weights[k] * g[c];
                }
            }
            p
        })
        .collect()
}

/// Distribution Γ_b of endpoint pairs from which N-point couplings are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EndpointSampler {
    /// All mass on one endpoint pair.
    Point { x0: Vec<f64>, x_t: Vec<f64> },
    /// x₀ uniform on the box [lo, hi], x_T = A x₀ + b.
    AffineBox {
        lo: Vec<f64>,
        hi: Vec<f64>,
        matrix: Vec<Vec<f64>>,
        shift: Vec<f64>,
    },
}

impl EndpointSampler {
    pub fn dim(&self) -> usize {
        match self {
            EndpointSampler::Point { x0, .. } => x0.len(),
            EndpointSampler::AffineBox { lo, .. } => lo.len(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            EndpointSampler::Point { x0, x_t } => {
                if x0.is_empty() || x0.len() != x_t.len() {
                    return Err(MfaError::InvalidInput(
                        "point sampler needs matching nonempty endpoints".into(),
                    ));
                }
            }
            EndpointSampler::AffineBox {
                lo,
                hi,
                matrix,
                shift,
            } => {
                let d = lo.len();
                if d == 0
                    || hi.len() != d
                    || shift.len() != d
                    || matrix.len() != d
                    || matrix.iter().any(|r| r.len() != d)
                {
                    return Err(MfaError::InvalidInput(
                        "affine sampler shapes disagree".into(),
                    ));
                }
                if lo.iter().zip(hi).any(|(a, b)| !(a <= b)) {
                    return Err(MfaError::InvalidInput(
                        "affine sampler needs lo ≤ hi".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// N-point uniform coupling. The box is sampled by a jittered Latin
    /// hypercube from a ChaCha8 stream selected by `n`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<EndpointCoupling> {
        self.validate()?;
        if n == 0 {
            return Err(MfaError::InvalidInput(
                "sample size must be positive".into(),
            ));
        }
        match self {
            EndpointSampler::Point { x0, x_t } => {
                EndpointCoupling::uniform(vec![(x0.clone(), x_t.clone()); n])
            }
            EndpointSampler::AffineBox {
                lo,
                hi,
                matrix,
                shift,
            } => {
                let d = lo.len();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(n as u64);
                let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
                for c in 0..d {
                    let mut strata: Vec<usize> = (0..n).collect();
                    if c > 0 {
                        for i in (1..n).rev() {
                            let j = rng.gen_range(0..=i);
                            strata.swap(i, j);
                        }
                    }
                    cols.push(
                        strata
                            .iter()
                            .map(|&s| {
                                let u: f64 = rng.gen();
                                lo[c] + (hi[c] - lo[c]) * (s as f64 + u) / n as f64
                            })
                            .collect(),
                    );
                }
                let pairs = (0..n)
                    .map(|k| {
                        let x0: Vec<f64> = (0..d).map(|c| cols[c][k]).collect();
                        let xt = (0..d)
                            .map(|r| shift[r] + (0..d).map(|c| matrix[r][c] * x0[c]).sum::<f64>())
                            .collect();
                        (x0, xt)
                    })
                    .collect();
                EndpointCoupling::uniform(pairs)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub n_ref: usize,
    /// Σ_i Δt W₂²(P^N_{t_i,ṫ_i}, P^{4N}_{t_i,ṫ_i}).
    pub distance: f64,
    pub action_n: f64,
    pub action_ref: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    /// Distances strictly decrease along the list.
    pub decreasing: bool,
}

pub fn convergence_experiment(
    sampler: &EndpointSampler,
    ns: &[usize],
    grid: TimeGrid,
    spec_psi: &PotentialSpec,
    spec_u: &PotentialSpec,
    opts: &OptimizeOptions,
    seed: u64,
) -> Result<ConvergenceTable> {
    let model = Model::new(spec_psi, spec_u, sampler.dim())?;
    if ns.is_empty() {
        return Err(MfaError::InvalidInput("empty N list".into()));
    }
    let mut sizes: Vec<usize> = ns.iter().flat_map(|&n| [n, 4 * n]).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let runs: Vec<(usize, Result<OptimizeReport>)> = sizes
        .par_iter()
        .map(|&n| {
            let run = sampler
                .sample(n, seed)
                .and_then(|c| optimize_with(&model, &c, grid, opts));
            (n, run)
        })
        .collect();
    let mut by_size = BTreeMap::new();
    for (n, r) in runs {
        by_size.insert(n, r?);
    }
    let dt = grid.dt();
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let (a, b) = (&by_size[&n], &by_size[&(4 * n)]);
        let mut dist = 0.0;
        for i in 0..grid.steps {
            let fa = statistic_at_interval(&a.ensemble, i)?;
            let fb = statistic_at_interval(&b.ensemble, i)?;
            let (w, _) = wp(&fa, &fb, 2.0, Metric::Phase)?;
            dist += dt * w * w;
        }
        rows.push(ConvergenceRow {
            n,
            n_ref: 4 * n,
            distance: dist,
            action_n: a.final_action,
            action_ref: b.final_action,
        });
    }
    let decreasing = rows.windows(2).all(|w| w[1].distance < w[0].distance);
    Ok(ConvergenceTable { rows, decreasing })
}

/// Four particles in the plane: two crossing left to right and two crossing
/// bottom to top, at unit horizon.
pub fn four_crossing_coupling() -> EndpointCoupling {
    EndpointCoupling::uniform(vec![
        (vec![-1.0, -0.5], vec![1.0, -0.5]),
        (vec![-1.0, 0.5], vec![1.0, 0.5]),
        (vec![-0.5, -1.0], vec![-0.5, 1.0]),
        (vec![0.5, -1.0], vec![0.5, 1.0]),
    ])
    .expect("static coupling")
}

/// Two groups of two particles with crossing straight-line paths. Returns
/// the coupling and the group index of every particle.
pub fn crossing_groups_coupling() -> (EndpointCoupling, Vec<usize>) {
    let c = EndpointCoupling::uniform(vec![
        (vec![-1.0, -0.5], vec![1.0, 0.5]),
        (vec![-1.0, 0.5], vec![1.0, -0.5]),
        (vec![-0.5, -1.0], vec![0.5, 1.0]),
        (vec![0.5, -1.0], vec![-0.5, 1.0]),
    ])
    .expect("static coupling");
    (c, vec![0, 0, 1, 1])
}

/// Mean distance over unordered pairs of paths at node `i`.
pub fn mean_pairwise_distance(ens: &PathEnsemble, i: usize) -> f64 {
    let p = ens.paths();
    let mut s = 0.0;
    let mut count = 0usize;
    for a in 0..p.len() {
        for b in (a + 1)..p.len() {
            s += p[a][i]
                .iter()
                .zip(&p[b][i])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        s / count as f64
    }
}

pub fn min_mean_pairwise_distance(ens: &PathEnsemble) -> f64 {
    (0..=ens.grid().steps)
        .map(|i| mean_pairwise_distance(ens, i))
        .fold(f64::INFINITY, f64::min)
}

/// Mean cosine of the angle between velocities of same-group pairs on
/// interval `i`.
pub fn group_alignment(ens: &PathEnsemble, groups: &[usize], i: usize) -> f64 {
    let vs: Vec<Vec<f64>> = (0..ens.len()).map(|k| ens.velocity(k, i)).collect();
    let mut s = 0.0;
    let mut count = 0usize;
    for a in 0..vs.len() {
        for b in (a + 1)..vs.len() {
            if groups[a] != groups[b] {
                continue;
            }
            let na = vs[a].iter().map(|c| c * c).sum::<f64>().sqrt();
            let nb = vs[b].iter().map(|c| c * c).sum::<f64>().sqrt();
            if na > 0.0 && nb > 0.0 {
                s += vs[a].iter().zip(&vs[b]).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
                count += 1;
            }
        }
    }
    if count == 0 {
        1.0
    } else {
        s / count as f64
    }
}
