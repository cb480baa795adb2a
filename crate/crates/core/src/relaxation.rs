//! Relaxed energy Φ^rel over finite mixtures of martingale velocity kernels,
//! recovery ensembles, and convex-order checks.

use microlp::{ComparisonOp, OptimizationDirection, Problem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MfaError, Result};
use crate::model::{
    apply_kernel, is_martingale, statistic_at_interval, DiscreteStatistic, PathEnsemble,
    PhasePoint, TimeGrid, VelocityKernel,
};
use crate::potentials::{audit_growth, AuditBox, Model, Potential, PotentialSpec};

/// Largest number of (atom, support point) pairs handled by [`relax`].
pub const MAX_SUPPORT: usize = 3000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VelocityGrid {
    /// Half-width of the box [−R, R]^d. `None` picks it from the data.
    #[serde(default)]
    pub radius: Option<f64>,
    /// Points per axis.
    pub points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelaxOptions {
    pub components: usize,
    pub starts: usize,
    pub seed: u64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Target martingale violation before the final repair.
    pub tol: f64,
}

impl Default for RelaxOptions {
    fn default() -> Self {
        RelaxOptions {
            components: 4,
            starts: 8,
            seed: 0,
            max_outer: 25,
            max_inner: 1500,
            tol: 1e-9,
        }
    }
}

/// Σ λ_i π_i with every π_i defined on the same source atoms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelMixture {
    lambdas: Vec<f64>,
    kernels: Vec<VelocityKernel>,
}

impl KernelMixture {
    pub fn new(lambdas: Vec<f64>, kernels: Vec<VelocityKernel>) -> Result<Self> {
        if lambdas.is_empty() || lambdas.len() != kernels.len() {
            return Err(MfaError::InvalidInput("need one weight per kernel".into()));
        }
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0))
            || (lambdas.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(MfaError::InvalidInput(
                "mixture weights must lie on the simplex".into(),
            ));
        }
        for k in &kernels[1..] {
            if k.source() != kernels[0].source() {
                return Err(MfaError::KernelMismatch(
                    "mixture components have different sources".into(),
                ));
            }
        }
        Ok(KernelMixture { lambdas, kernels })
    }

    pub fn identity(f: &DiscreteStatistic) -> Self {
        KernelMixture {
            lambdas: vec![1.0],
            kernels: vec![VelocityKernel::identity(f)],
        }
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn kernels(&self) -> &[VelocityKernel] {
        &self.kernels
    }

    pub fn source(&self) -> &[PhasePoint] {
        self.kernels[0].source()
    }

    /// The averaged kernel Σ λ_i π_i.
    pub fn mixture(&self) -> VelocityKernel {
        let n = self.source().len();
        let rows = (0..n)
            .map(|a| {
                let mut row: Vec<(Vec<f64>, f64)> = Vec::new();
                for (l, k) in self.lambdas.iter().zip(&self.kernels) {
                    for (v, q) in &k.rows()[a] {
                        match row.iter_mut().find(|(u, _)| u == v) {
                            Some(e) => e.1 += l * q,
                            None => row.push((v.clone(), l * q)),
                        }
                    }
                }
                row
            })
            .collect();
        VelocityKernel::new(self.source().to_vec(), rows)
            .expect("mixture of valid kernels is valid")
    }

    pub fn is_martingale(&self, tol: f64) -> bool {
        is_martingale(&self.mixture(), tol)
    }

    /// Σ λ_i Φ(fπ_i) where f is the source statistic with weights `w`.
    pub fn value(&self, model: &Model, w: &[f64]) -> Result<f64> {
        let f = DiscreteStatistic::new(self.source().to_vec(), w.to_vec())?;
        let mut total = 0.0;
        for (l, k) in self.lambdas.iter().zip(&self.kernels) {
            if *l > 0.0 {
                total += l * model.phi(&apply_kernel(&f, k)?);
            }
        }
        Ok(total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelaxDiagnostics {
    /// Relaxed value reached from each start; start 0 is the identity kernel.
    pub start_values: Vec<f64>,
    pub best_start: usize,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    /// max |Σλ_i mean(π_i) − v| before the repair step.
    pub violation_before_repair: f64,
    /// Largest mass moved by the repair step.
    pub repair_mass: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RelaxBounds {
    pub upper: f64,
    pub lower: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelaxReport {
    pub value: f64,
    /// Φ(f) itself.
    pub phi: f64,
    pub mixture: KernelMixture,
    pub radius: f64,
    /// "explicit", "coercivity" or "velocity_scale".
    pub radius_source: String,
    pub points: usize,
    pub bounds: RelaxBounds,
    /// Exact optimum over the grid when Φ is linear in f.
    pub exact_grid: Option<f64>,
    pub diagnostics: RelaxDiagnostics,
}

fn axis(radius: f64, points: usize) -> Vec<f64> {
    (0..points)
        .map(|j| -radius + 2.0 * radius * j as f64 / (points - 1) as f64)
        .collect()
}

fn tensor_grid(radius: f64, points: usize, d: usize) -> Vec<Vec<f64>> {
    let ax = axis(radius, points);
    let total = points.pow(d as u32);
    (0..total)
        .map(|mut idx| {
            let mut v = vec![0.0; d];
            for c in 0..d {
                v[c] = ax[idx % points];
                idx /= points;
            }
            v
        })
        .collect()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Euclidean projection onto the probability simplex.
fn project_simplex(y: &mut [f64]) {
    let mut u: Vec<f64> = y.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    for v in y.iter_mut() {
        *v = (*v - theta).max(0.0);
    }
}

/// The grid-restricted problem in the variables (λ, π_i(a, s)).
struct GridProblem {
    n: usize,
    d: usize,
    s_len: usize,
    comps: usize,
    /// support[a][s]
    support: Vec<Vec<Vec<f64>>>,
    v: Vec<Vec<f64>>,
    /// w_a ψ(x_a, s), flattened over (a, s).
    lin: Vec<f64>,
    /// w_a w_b U(x_a − x_b, s − t), row-major over (a, s) × (b, t).
    kmat: Option<Vec<f64>>,
}

struct AlState {
    y: Vec<Vec<f64>>,
    rho: f64,
}

impl GridProblem {
    fn build(model: &Model, f: &DiscreteStatistic, grid: &[Vec<f64>], comps: usize) -> Self {
        let n = f.len();
        let d = f.dim();
        let s_len = grid.len() + 1;
        let support: Vec<Vec<Vec<f64>>> = f
            .points()
            .iter()
            .map(|p| {
                let mut s = grid.to_vec();
                s.push(p.v.clone());
                s
            })
            .collect();
        let w = f.weights();
        let mut lin = Vec::with_capacity(n * s_len);
        for a in 0..n {
            for s in &support[a] {
                lin.push(w[a] * model.psi_value(&f.points()[a].x, s));
            }
        }
        let interacting = !model.interaction.is_zero() || model.is_variance_penalty();
        let kmat = interacting.then(|| {
            let m = n * s_len;
            let rows: Vec<Vec<f64>> = (0..m)
                .into_par_iter()
                .map(|r| {
                    let (a, s) = (r / s_len, r % s_len);
                    let mut row = vec![0.0; m];
                    let mut dx = vec![0.0; d];
                    let mut dv = vec![0.0; d];
                    for b in 0..n {
                        for c in 0..d {
                            dx[c] = f.points()[a].x[c] - f.points()[b].x[c];
                        }
                        for t in 0..s_len {
                            for c in 0..d {
                                dv[c] = support[a][s][c] - support[b][t][c];
                            }
                            row[b * s_len + t] = w[a] * w[b] * model.u_value(&dx, &dv);
                        }
                    }
                    row
                })
                .collect();
            rows.concat()
        });
        let v = f.points().iter().map(|p| p.v.clone()).collect();
        GridProblem {
            n,
            d,
            s_len,
            comps,
            support,
            v,
            lin,
            kmat,
        }
    }

    fn block(&self) -> usize {
        self.n * self.s_len
    }

    fn len(&self) -> usize {
        self.comps + self.comps * self.block()
    }

    fn pi<'a>(&self, z: &'a [f64], i: usize) -> &'a [f64] {
        let o = self.comps + i * self.block();
        &z[o..o + self.block()]
    }

    /// Φ(fπ_i) and its gradient with respect to π_i.
    fn phi_component(&self, p: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let m = self.block();
        let mut value: f64 = self.lin.iter().zip(p).map(|(a, b)| a * b).sum();
        match &self.kmat {
            Some(k) => {
                let kp: Vec<f64> = (0..m)
                    .map(|r| {
                        k[r * m..(r + 1) * m]
                            .iter()
                            .zip(p)
                            .map(|(a, b)| a * b)
                            .sum()
                    })
                    .collect();
                value += 0.5 * kp.iter().zip(p).map(|(a, b)| a * b).sum::<f64>();
                if let Some(g) = grad {
                    for r in 0..m {
                        g[r] = self.lin[r] + kp[r];
                    }
                }
            }
            None => {
                if let Some(g) = grad {
                    g.copy_from_slice(&self.lin);
                }
            }
        }
        value
    }

    fn means(&self, p: &[f64]) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|a| {
                let mut m = vec![0.0; self.d];
                for s in 0..self.s_len {
                    let q = p[a * self.s_len + s];
                    if q != 0.0 {
                        for c in 0..self.d {
                            m[c] += q * self.support[a][s][c];
                        }
                    }
                }
                m
            })
            .collect()
    }

    /// Martingale residual c_a = Σ_i λ_i mean_i(a) − v_a.
    fn residual(&self, z: &[f64]) -> Vec<Vec<f64>> {
        let mut c: Vec<Vec<f64>> = self
            .v
            .iter()
            .map(|v| v.iter().map(|x| -x).collect())
            .collect();
        for i in 0..self.comps {
            let m = self.means(self.pi(z, i));
            for a in 0..self.n {
                for k in 0..self.d {
                    c[a][k] += z[i] * m[a][k];
                }
            }
        }
        c
    }

    /// Augmented Lagrangian value and gradient.
    fn augmented(&self, z: &[f64], st: &AlState, grad: &mut [f64]) -> f64 {
        let m = self.block();
        let c = self.residual(z);
        let mult: Vec<Vec<f64>> = c
            .iter()
            .zip(&st.y)
            .map(|(ca, ya)| ca.iter().zip(ya).map(|(cc, yy)| yy + st.rho * cc).collect())
            .collect();
        let mut value = 0.0;
        for a in 0..self.n {
            for k in 0..self.d {
                value += st.y[a][k] * c[a][k] + 0.5 * st.rho * c[a][k] * c[a][k];
            }
        }
        for i in 0..self.comps {
            let lam = z[i];
            let o = self.comps + i * m;
            let (head, tail) = grad.split_at_mut(o);
            let g = &mut tail[..m];
            let p = &z[o..o + m];
            let phi = self.phi_component(p, Some(g));
            value += lam * phi;
            let means = self.means(p);
            let mut dl = phi;
            for a in 0..self.n {
                for k in 0..self.d {
                    dl += mult[a][k] * means[a][k];
                }
                for s in 0..self.s_len {
                    let r = a * self.s_len + s;
                    let mut t = g[r];
                    for k in 0..self.d {
                        t += mult[a][k] * self.support[a][s][k];
                    }
                    g[r] = lam * t;
                }
            }
            head[i] = dl;
        }
        value
    }

    fn project(&self, z: &mut [f64]) {
        project_simplex(&mut z[..self.comps]);
        for blk in z[self.comps..].chunks_mut(self.s_len) {
            project_simplex(blk);
        }
    }

    /// Accelerated projected gradient on the augmented Lagrangian.
    fn inner(&self, z: &mut Vec<f64>, st: &AlState, max_iter: usize, step_tol: f64) -> usize {
        let len = z.len();
        let mut y = z.clone();
        let mut gy = vec![0.0; len];
        let mut gtmp = vec![0.0; len];
        let mut znew = vec![0.0; len];
        let mut eta = 1.0;
        let mut t = 1.0f64;
        let mut fz = self.augmented(z, st, &mut gtmp);
        for it in 0..max_iter {
            let fy = self.augmented(&y, st, &mut gy);
            let mut fnew;
            loop {
                for j in 0..len {
                    znew[j] = y[j] - eta * gy[j];
                }
                self.project(&mut znew);
                fnew = self.augmented(&znew, st, &mut gtmp);
                let mut lin = 0.0;
                let mut sq = 0.0;
                for j in 0..len {
                    let dz = znew[j] - y[j];
                    lin += gy[j] * dz;
                    sq += dz * dz;
                }
                if fnew <= fy + lin + sq / (2.0 * eta) + 1e-15 * fy.abs() || eta < 1e-14 {
                    break;
                }
                eta *= 0.5;
            }
            let step = znew
                .iter()
                .zip(z.iter())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            if fnew > fz {
                // Restart the momentum from the last accepted point.
                if y == *z {
                    return it;
                }
                y.copy_from_slice(z);
                t = 1.0;
                continue;
            }
            let tn = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / tn;
            for j in 0..len {
                y[j] = znew[j] + beta * (znew[j] - z[j]);
            }
            self.project(&mut y);
            z.copy_from_slice(&znew);
            fz = fnew;
            t = tn;
            eta *= 1.5;
            if step < step_tol {
                return it + 1;
            }
        }
        max_iter
    }

    /// Grid cell weights reproducing `q` exactly by multilinear interpolation.
    fn interpolate(&self, q: &[f64], radius: f64, points: usize) -> Vec<(usize, f64)> {
        let h = 2.0 * radius / (points - 1) as f64;
        let mut cells = vec![(0usize, 1.0f64)];
        let mut stride = 1;
        for c in 0..self.d {
            let u = ((q[c] + radius) / h).clamp(0.0, (points - 1) as f64);
            let j = (u.floor() as usize).min(points - 2);
            let frac = u - j as f64;
            let mut next = Vec::with_capacity(cells.len() * 2);
            for (idx, wgt) in &cells {
                next.push((idx + j * stride, wgt * (1.0 - frac)));
                next.push((idx + (j + 1) * stride, wgt * frac));
            }
            cells = next;
            stride *= points;
        }
        cells.retain(|(_, w)| *w > 0.0);
        cells
    }

    /// Makes the mixture exactly martingale by blending every component of
    /// atom `a` with a small grid distribution. Returns the largest blend weight.
    fn repair(&self, z: &mut [f64], radius: f64, points: usize) -> f64 {
        let lam_sum: f64 = z[..self.comps].iter().sum();
        for l in z[..self.comps].iter_mut() {
            *l /= lam_sum;
        }
        for i in 0..self.comps {
            for a in 0..self.n {
                let o = self.comps + i * self.block() + a * self.s_len;
                let blk = &mut z[o..o + self.s_len];
                for q in blk.iter_mut() {
                    if *q < 1e-13 {
                        *q = 0.0;
                    }
                }
                let tot: f64 = blk.iter().sum();
                if tot > 0.0 {
                    blk.iter_mut().for_each(|q| *q /= tot);
                } else {
                    blk[self.s_len - 1] = 1.0;
                }
            }
        }
        let c = self.residual(z);
        let mut worst = 0.0f64;
        for a in 0..self.n {
            let e: Vec<f64> = c[a].iter().map(|x| -x).collect();
            let err = inf_norm(&e);
            if err == 0.0 {
                continue;
            }
            let slack = radius - inf_norm(&self.v[a]);
            let theta = if slack > 0.0 {
                (2.0 * err / slack).min(1.0)
            } else {
                1.0
            };
            worst = worst.max(theta);
            for i in 0..self.comps {
                let o = self.comps + i * self.block() + a * self.s_len;
                for q in &mut z[o..o + self.s_len] {
                    *q *= 1.0 - theta;
                }
                if theta >= 1.0 {
                    z[o + self.s_len - 1] = 1.0;
                    continue;
                }
                // m̄ = v − e, so (1 − θ)m̄ + θq = v for q = v + (1 − θ)e/θ.
                let q: Vec<f64> = (0..self.d)
                    .map(|k| self.v[a][k] + (1.0 - theta) * e[k] / theta)
                    .collect();
                for (idx, wgt) in self.interpolate(&q, radius, points) {
                    z[o + idx] += theta * wgt;
                }
            }
        }
        worst
    }

    fn to_mixture(&self, z: &[f64], f: &DiscreteStatistic) -> KernelMixture {
        let mut lambdas = Vec::new();
        let mut kernels = Vec::new();
        for i in 0..self.comps {
            if z[i] <= 0.0 {
                continue;
            }
            let p = self.pi(z, i);
            let rows = (0..self.n)
                .map(|a| {
                    let mut row: Vec<(Vec<f64>, f64)> = Vec::new();
                    for s in 0..self.s_len {
                        let q = p[a * self.s_len + s];
                        if q > 0.0 {
                            match row.iter_mut().find(|(u, _)| *u == self.support[a][s]) {
                                Some(e) => e.1 += q,
                                None => row.push((self.support[a][s].clone(), q)),
                            }
                        }
                    }
                    row
                })
                .collect();
            lambdas.push(z[i]);
            kernels.push(
                VelocityKernel::new(f.points().to_vec(), rows)
                    .expect("projected rows are distributions"),
            );
        }
        let tot: f64 = lambdas.iter().sum();
        lambdas.iter_mut().for_each(|l| *l /= tot);
        KernelMixture { lambdas, kernels }
    }

    fn identity_start(&self) -> Vec<f64> {
        let mut z = vec![0.0; self.len()];
        for i in 0..self.comps {
            z[i] = 1.0 / self.comps as f64;
            for a in 0..self.n {
                z[self.comps + i * self.block() + a * self.s_len + self.s_len - 1] = 1.0;
            }
        }
        z
    }

    fn random_start(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut z = vec![0.0; self.len()];
        for i in 0..self.comps {
            z[i] = rng.gen_range(0.1..1.0);
            for a in 0..self.n {
                let o = self.comps + i * self.block() + a * self.s_len;
                z[o + self.s_len - 1] += 0.5;
                for _ in 0..2 {
                    let s = rng.gen_range(0..self.s_len - 1);
                    z[o + s] += 0.25;
                }
            }
        }
        project_simplex(&mut z[..self.comps]);
        z
    }
}

struct StartResult {
    z: Vec<f64>,
    outer: usize,
    inner: usize,
    violation: f64,
    converged: bool,
}

fn run_start(pb: &GridProblem, mut z: Vec<f64>, opts: &RelaxOptions) -> StartResult {
    let mut st = AlState {
        y: vec![vec![0.0; pb.d]; pb.n],
        rho: 10.0,
    };
    let mut inner_total = 0;
    let mut prev = f64::INFINITY;
    let mut violation = f64::INFINITY;
    let mut outer = 0;
    let mut converged = false;
    while outer < opts.max_outer {
        outer += 1;
        let used = pb.inner(&mut z, &st, opts.max_inner, 1e-11);
        inner_total += used;
        let c = pb.residual(&z);
        violation = c.iter().map(|ca| inf_norm(ca)).fold(0.0, f64::max);
        if violation < opts.tol && used < opts.max_inner {
            converged = true;
            break;
        }
        for a in 0..pb.n {
            for k in 0..pb.d {
                st.y[a][k] += st.rho * c[a][k];
            }
        }
        if violation > 0.25 * prev {
            st.rho = (st.rho * 10.0).min(1e8);
        }
        prev = violation;
    }
    StartResult {
        z,
        outer,
        inner: inner_total,
        violation,
        converged,
    }
}

fn default_radius(
    model: &Model,
    psi: &PotentialSpec,
    u: &PotentialSpec,
    f: &DiscreteStatistic,
) -> Result<(f64, String)> {
    let vmax = f
        .points()
        .iter()
        .map(|p| inf_norm(&p.v))
        .fold(0.0, f64::max);
    let xmax = f
        .points()
        .iter()
        .map(|p| inf_norm(&p.x))
        .fold(0.0, f64::max);
    let scale = (5.0 * vmax).max(1.0);
    let audit = audit_growth(
        psi,
        u,
        &AuditBox {
            dim: f.dim(),
            x_radius: xmax,
            v_radius: (2.0 * vmax).max(1.0),
        },
        200,
        0,
    )?;
    if audit.c > 1e-6 {
        let rc = ((model.phi(f) + audit.big_c) / audit.c).sqrt();
        if rc > scale {
            return Ok((rc, "coercivity".into()));
        }
    }
    Ok((scale, "velocity_scale".into()))
}

/// min Σ_s p_s y_s over distributions p on `pts` with mean `v`.
fn envelope_at(pts: &[Vec<f64>], y: &[f64], v: &[f64]) -> Result<f64> {
    if v.len() == 1 {
        let mut pairs: Vec<(f64, f64)> = pts.iter().map(|p| p[0]).zip(y.iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        pairs.dedup_by(|b, a| a.0 == b.0);
        let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        if v[0] < xs[0] || v[0] > xs[xs.len() - 1] {
            return Err(MfaError::InfeasibleGrid(format!(
                "velocity {} outside the grid",
                v[0]
            )));
        }
        let hull = lower_hull(&xs, &ys);
        return Ok(eval_hull(&hull, v[0]));
    }
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<_> = y
        .iter()
        .map(|c| lp.add_var(*c, (0.0, f64::INFINITY)))
        .collect();
    lp.add_constraint(
        vars.iter()
            .map(|v| (*v, 1.0))
            .collect::<Vec<_>>()
            .as_slice(),
        ComparisonOp::Eq,
        1.0,
    );
    for c in 0..v.len() {
        let row: Vec<_> = vars.iter().zip(pts).map(|(var, p)| (*var, p[c])).collect();
        lp.add_constraint(row.as_slice(), ComparisonOp::Eq, v[c]);
    }
    let sol = lp
        .solve()
        .map_err(|e| MfaError::InfeasibleGrid(format!("envelope LP: {e:?}")))?
        .into_solution()
        .map_err(|_| MfaError::NonConvergence("envelope LP interrupted".into()))?;
    Ok(sol.objective())
}

/// Φ^rel(f) estimated over mixtures of `opts.components` kernels supported
/// on a tensor grid of `grid.points` points per axis on [−R, R]^d (plus the
/// source velocity of each atom).
pub fn relax(
    f: &DiscreteStatistic,
    psi: &PotentialSpec,
    u: &PotentialSpec,
    grid: &VelocityGrid,
    opts: &RelaxOptions,
) -> Result<RelaxReport> {
    let model = Model::new(psi, u, f.dim())?;
    if grid.points < 2 {
        return Err(MfaError::InvalidInput(
            "velocity grid needs at least 2 points per axis".into(),
        ));
    }
    if opts.components == 0 || opts.starts == 0 {
        return Err(MfaError::InvalidInput(
            "components and starts must be positive".into(),
        ));
    }
    let d = f.dim();
    let (radius, radius_source) = match grid.radius {
        Some(r) if r.is_finite() && r > 0.0 => (r, "explicit".to_string()),
        Some(r) => return Err(MfaError::InvalidInput(format!("invalid grid radius {r}"))),
        None => default_radius(&model, psi, u, f)?,
    };
    for p in f.points() {
        if inf_norm(&p.v) > radius {
            return Err(MfaError::InfeasibleGrid(format!(
                "source velocity {:?} lies outside the grid box of radius {radius}",
                p.v
            )));
        }
    }
    let cells = (grid.points as f64).powi(d as i32) + 1.0;
    if cells * f.len() as f64 > MAX_SUPPORT as f64 {
        return Err(MfaError::GuardExceeded(format!(
            "{} atoms × {} support points exceeds {MAX_SUPPORT}",
            f.len(),
            cells
        )));
    }
    let pts = tensor_grid(radius, grid.points, d);
    let pb = GridProblem::build(&model, f, &pts, opts.components);

    let exact_grid = if model.is_noninteracting() {
        let mut total = 0.0;
        for (a, (p, w)) in f.points().iter().zip(f.weights()).enumerate() {
            let ys: Vec<f64> = pb.support[a]
                .iter()
                .map(|s| model.psi_value(&p.x, s))
                .collect();
            total += w * envelope_at(&pb.support[a], &ys, &p.v)?;
        }
        Some(total)
    } else {
        None
    };

    let results: Vec<(f64, StartResult, f64, KernelMixture)> = (0..opts.starts)
        .into_par_iter()
        .map(|s| {
            let z0 = if s == 0 {
                pb.identity_start()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
                rng.set_stream(s as u64);
                pb.random_start(&mut rng)
            };
            let mut r = run_start(&pb, z0, opts);
            let moved = pb.repair(&mut r.z, radius, grid.points);
            let mix = pb.to_mixture(&r.z, f);
            let value = mix.value(&model, f.weights()).unwrap_or(f64::INFINITY);
            (value, r, moved, mix)
        })
        .collect();
    let start_values: Vec<f64> = results.iter().map(|r| r.0).collect();
    let mut best = 0;
    for (i, v) in start_values.iter().enumerate() {
        if *v < start_values[best] {
            best = i;
        }
    }
    let (value, r, moved, mixture) = results.into_iter().nth(best).expect("at least one start");
    if !value.is_finite() {
        return Err(MfaError::NonFinite("relaxed value".into()));
    }
    Ok(RelaxReport {
        value,
        phi: model.phi(f),
        mixture,
        radius,
        radius_source,
        points: grid.points,
        bounds: RelaxBounds {
            upper: value,
            lower: exact_grid,
        },
        exact_grid,
        diagnostics: RelaxDiagnostics {
            start_values,
            best_start: best,
            outer_iterations: r.outer,
            inner_iterations: r.inner,
            violation_before_repair: r.violation,
            repair_mass: moved,
            converged: r.converged,
        },
    })
}

/// Lower convex hull vertices of the points (xs, ys), xs strictly increasing.
fn lower_hull(xs: &[f64], ys: &[f64]) -> Vec<(f64, f64)> {
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(xs.len());
    for (&x, &y) in xs.iter().zip(ys) {
        while hull.len() >= 2 {
            let (ox, oy) = hull[hull.len() - 2];
            let (ax, ay) = hull[hull.len() - 1];
            if (ax - ox) * (y - oy) - (ay - oy) * (x - ox) <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push((x, y));
    }
    hull
}

fn eval_hull(hull: &[(f64, f64)], x: f64) -> f64 {
    let j = hull.partition_point(|p| p.0 < x);
    if j < hull.len() && hull[j].0 == x {
        return hull[j].1;
    }
    if j == 0 {
        return hull[0].1;
    }
    if j == hull.len() {
        return hull[j - 1].1;
    }
    let (x0, y0) = hull[j - 1];
    let (x1, y1) = hull[j];
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

/// Lower convex envelope of sampled values `ys` on the increasing grid `xs`.
pub fn convex_envelope_1d(xs: &[f64], ys: &[f64]) -> Result<Vec<f64>> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(MfaError::InvalidInput(
            "grid and samples must be nonempty and of equal length".into(),
        ));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(MfaError::NonFinite("envelope samples".into()));
    }
    if xs.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(MfaError::InvalidInput(
            "grid must be strictly increasing".into(),
        ));
    }
    let hull = lower_hull(xs, ys);
    Ok(xs.iter().map(|&x| eval_hull(&hull, x)).collect())
}

/// ⟨f, ψ**⟩ for U = 0 and d = 1, with the envelope of v ↦ ψ(x_a, v) taken on
/// `points` samples of [−R, R], R = max(10, 4 max|v|).
pub fn relax_noninteracting(f: &DiscreteStatistic, psi: &PotentialSpec) -> Result<f64> {
    relax_noninteracting_on(f, psi, 2001)
}

pub fn relax_noninteracting_on(
    f: &DiscreteStatistic,
    psi: &PotentialSpec,
    points: usize,
) -> Result<f64> {
    if f.dim() != 1 {
        return Err(MfaError::DimensionMismatch {
            expected: 1,
            got: f.dim(),
        });
    }
    if psi.kind == crate::potentials::PotentialKind::VariancePenalty {
        return Err(MfaError::InvalidInput(
            "variance_penalty interacts; use relax".into(),
        ));
    }
    let p = Potential::from_spec(psi)?;
    let vmax = f.points().iter().map(|p| p.v[0].abs()).fold(0.0, f64::max);
    let r = (4.0 * vmax).max(10.0);
    let base = axis(r, points.max(2));
    let mut total = 0.0;
    for (pt, w) in f.points().iter().zip(f.weights()) {
        let mut xs = base.clone();
        let j = xs.partition_point(|x| *x < pt.v[0]);
        if xs.get(j) != Some(&pt.v[0]) {
            xs.insert(j, pt.v[0]);
        }
        let ys: Vec<f64> = xs.iter().map(|v| p.value(&pt.x, &[*v])).collect();
        let env = convex_envelope_1d(&xs, &ys)?;
        total += w * env[j];
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoveryOptions {
    /// λ_i are rounded to multiples of 1/quantum.
    pub quantum: usize,
    /// Each kernel row is rounded to this many equally weighted samples, and
    /// each path gets this many copies.
    pub copies: usize,
}

impl Default for RecoveryOptions {
    fn default() -> Self {
        RecoveryOptions {
            quantum: 8,
            copies: 8,
        }
    }
}

/// Largest-remainder rounding of `p` to integer counts summing to `total`.
fn round_counts(p: &[f64], total: usize) -> Vec<usize> {
    let s: f64 = p.iter().sum();
    let raw: Vec<f64> = p.iter().map(|q| q / s * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut rest = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        (raw[b] - raw[b].floor())
            .total_cmp(&(raw[a] - raw[a].floor()))
            .then(a.cmp(&b))
    });
    for &j in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[j] += 1;
        rest -= 1;
    }
    counts
}

/// Per interval: the component schedule (component, steps per sub-block) and
/// per atom the `copies` samples of each scheduled component.
struct IntervalPlan {
    schedule: Vec<usize>,
    /// items[a][slot][ℓ] velocity, slot indexing `schedule`.
    items: Vec<Vec<Vec<Vec<f64>>>>,
}

fn plan_interval(mix: &KernelMixture, opts: &RecoveryOptions) -> IntervalPlan {
    let q = opts.quantum;
    let l = opts.copies;
    let counts = round_counts(mix.lambdas(), q);
    let schedule: Vec<usize> = counts.clone();
    let n = mix.source().len();
    let d = mix.source()[0].dim();
    let mut items = Vec::with_capacity(n);
    for a in 0..n {
        let mut per_slot = Vec::with_capacity(schedule.len());
        let mut mean = vec![0.0; d];
        for (i, k) in mix.kernels().iter().enumerate() {
            let row = &k.rows()[a];
            let probs: Vec<f64> = row.iter().map(|r| r.1).collect();
            let c = round_counts(&probs, l);
            let mut list = Vec::with_capacity(l);
            for (e, cnt) in row.iter().zip(&c) {
                for _ in 0..*cnt {
                    list.push(e.0.clone());
                }
            }
            for u in &list {
                for cc in 0..d {
                    mean[cc] += counts[i] as f64 / q as f64 * u[cc] / l as f64;
                }
            }
            per_slot.push(list);
        }
        // Shift so that each copy's cycle displacement is exactly v·(Δt/k).
        let v = &mix.source()[a].v;
        let shift: Vec<f64> = (0..d).map(|cc| v[cc] - mean[cc]).collect();
        for list in per_slot.iter_mut() {
            for u in list.iter_mut() {
                for cc in 0..d {
                    u[cc] += shift[cc];
                }
            }
        }
        items.push(per_slot);
    }
    IntervalPlan { schedule, items }
}

/// Replaces each path by `opts.copies` copies that, on every base interval,
/// run `k` cycles through the mixture components. Component i occupies a
/// fraction ≈ λ_i of each cycle, split into `copies` sub-blocks; in sub-block
/// ℓ copy j moves with the ((j + ℓ) mod copies)-th sample of π_i. Every copy
/// passes through each base node, and the endpoints are copied bit-exactly.
pub fn recovery_ensemble(
    base: &PathEnsemble,
    mixtures: &[KernelMixture],
    k: usize,
    opts: &RecoveryOptions,
) -> Result<PathEnsemble> {
    let grid = base.grid();
    let m = grid.steps;
    if mixtures.len() != m {
        return Err(MfaError::InvalidInput(format!(
            "need {m} mixtures, got {}",
            mixtures.len()
        )));
    }
    if k == 0 || opts.quantum == 0 || opts.copies == 0 {
        return Err(MfaError::InvalidInput(
            "k, quantum and copies must be positive".into(),
        ));
    }
    for (i, mix) in mixtures.iter().enumerate() {
        let f = statistic_at_interval(base, i)?;
        if mix.source() != f.points() {
            return Err(MfaError::KernelMismatch(format!(
                "mixture {i} is not defined on the interval statistic"
            )));
        }
        if !mix.is_martingale(1e-9) {
            return Err(MfaError::InvalidInput(format!(
                "mixture {i} is not a martingale kernel"
            )));
        }
    }
    let identity = mixtures.iter().all(|mix| {
        mix.kernels().iter().all(|kern| {
            kern.rows()
                .iter()
                .zip(kern.source())
                .all(|(row, p)| row.iter().all(|(v, q)| *q == 0.0 || *v == p.v))
        })
    });
    if identity {
        return Ok(base.clone());
    }
    let q = opts.quantum;
    let l = opts.copies;
    let sub = k * q * l;
    let fine = TimeGrid::new(grid.horizon, m * sub)?;
    let h = grid.dt() / sub as f64;
    let plans: Vec<IntervalPlan> = mixtures
        .iter()
        .map(|mix| plan_interval(mix, opts))
        .collect();
    let d = base.dim();
    let mut paths = Vec::with_capacity(base.len() * l);
    let mut weights = Vec::with_capacity(base.len() * l);
    for (a, (path, w)) in base.paths().iter().zip(base.weights()).enumerate() {
        for j in 0..l {
            let mut nodes = Vec::with_capacity(m * sub + 1);
            for i in 0..m {
                let plan = &plans[i];
                let mut x = path[i].clone();
                nodes.push(x.clone());
                let mut count = 0;
                for _ in 0..k {
                    for (slot, &steps) in plan.schedule.iter().enumerate() {
                        for ell in 0..l {
                            let u = &plan.items[a][slot][(j + ell) % l];
                            for _ in 0..steps {
                                for c in 0..d {
                                    x[c] += h * u[c];
                                }
                                count += 1;
                                if count < sub {
                                    nodes.push(x.clone());
                                }
                            }
                        }
                    }
                }
            }
            nodes.push(path[m].clone());
            paths.push(nodes);
            weights.push(w / l as f64);
        }
    }
    PathEnsemble::new(fine, paths, weights)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvexOrderReport {
    /// Whether f ⪯ g, decided by the Strassen LP.
    pub holds: bool,
    /// Number of v-convex test functions evaluated.
    pub tests: usize,
    /// min over tests of ⟨g, φ⟩ − ⟨f, φ⟩.
    pub min_gap: f64,
    pub worst_test: Option<String>,
    /// A martingale kernel π with g = fπ when one exists.
    pub witness: Option<VelocityKernel>,
}

fn group_by_x(f: &DiscreteStatistic) -> Vec<(Vec<f64>, Vec<usize>)> {
    let mut groups: Vec<(Vec<f64>, Vec<usize>)> = Vec::new();
    for (a, p) in f.points().iter().enumerate() {
        match groups.iter_mut().find(|(x, _)| *x == p.x) {
            Some(g) => g.1.push(a),
            None => groups.push((p.x.clone(), vec![a])),
        }
    }
    groups
}

fn directions(d: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for c in 0..d {
        let mut e = vec![0.0; d];
        e[c] = 1.0;
        out.push(e.clone());
        e[c] = -1.0;
        out.push(e);
    }
    if d >= 2 {
        for c in 0..d {
            for c2 in (c + 1)..d {
                for (s1, s2) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                    let mut e = vec![0.0; d];
                    e[c] = s1 / 2f64.sqrt();
                    e[c2] = s2 / 2f64.sqrt();
                    out.push(e);
                }
            }
        }
    }
    out
}

/// Tests f ⪯ g in the v-convex order for statistics with a common x-marginal.
pub fn convex_order_check(
    f: &DiscreteStatistic,
    g: &DiscreteStatistic,
    tol: f64,
) -> Result<ConvexOrderReport> {
    if f.dim() != g.dim() {
        return Err(MfaError::DimensionMismatch {
            expected: f.dim(),
            got: g.dim(),
        });
    }
    let d = f.dim();
    let gf = group_by_x(f);
    let gg = group_by_x(g);
    let mass =
        |s: &DiscreteStatistic, idx: &[usize]| idx.iter().map(|&a| s.weights()[a]).sum::<f64>();
    let mut tests = 0;
    let mut min_gap = f64::INFINITY;
    let mut worst_test = None;
    let mut same_marginal = gf.len() == gg.len();
    for (x, fi) in &gf {
        match gg.iter().find(|(y, _)| y == x) {
            Some((_, gi)) if (mass(f, fi) - mass(g, gi)).abs() <= tol => {
                let mut record = |name: String, phi: &dyn Fn(&[f64]) -> f64| {
                    let ef: f64 = fi
                        .iter()
                        .map(|&a| f.weights()[a] * phi(&f.points()[a].v))
                        .sum();
                    let eg: f64 = gi
                        .iter()
                        .map(|&b| g.weights()[b] * phi(&g.points()[b].v))
                        .sum();
                    tests += 1;
                    if eg - ef < min_gap {
                        min_gap = eg - ef;
                        worst_test = Some(name);
                    }
                };
                for c in 0..d {
                    record(format!("v_{c} at x={x:?}"), &|v| v[c]);
                    record(format!("-v_{c} at x={x:?}"), &|v| -v[c]);
                }
                let anchors: Vec<Vec<f64>> = fi
                    .iter()
                    .map(|&a| f.points()[a].v.clone())
                    .chain(gi.iter().map(|&b| g.points()[b].v.clone()))
                    .collect();
                let dirs = directions(d);
                for u in &anchors {
                    record(format!("|v - {u:?}| at x={x:?}"), &|v| {
                        v.iter()
                            .zip(u)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt()
                    });
                    for e in &dirs {
                        record(
                            format!("(e·(v - {u:?}))_+ with e={e:?} at x={x:?}"),
                            &|v| {
                                e.iter()
                                    .zip(v.iter().zip(u))
                                    .map(|(ec, (a, b))| ec * (a - b))
                                    .sum::<f64>()
                                    .max(0.0)
                            },
                        );
                    }
                }
            }
            _ => same_marginal = false,
        }
    }
    if !same_marginal {
        return Ok(ConvexOrderReport {
            holds: false,
            tests,
            min_gap: f64::NEG_INFINITY,
            worst_test: Some("x-marginals differ".into()),
            witness: None,
        });
    }
    let witness = strassen_witness(f, g, &gf, &gg, tol)?;
    Ok(ConvexOrderReport {
        holds: witness.is_some(),
        tests,
        min_gap,
        worst_test,
        witness,
    })
}

fn strassen_witness(
    f: &DiscreteStatistic,
    g: &DiscreteStatistic,
    gf: &[(Vec<f64>, Vec<usize>)],
    gg: &[(Vec<f64>, Vec<usize>)],
    tol: f64,
) -> Result<Option<VelocityKernel>> {
    let d = f.dim();
    let mut rows: Vec<Vec<(Vec<f64>, f64)>> = vec![Vec::new(); f.len()];
    for (x, fi) in gf {
        let gi = &gg.iter().find(|(y, _)| y == x).expect("matched group").1;
        let mut lp = Problem::new(OptimizationDirection::Minimize);
        let vars: Vec<Vec<_>> = fi
            .iter()
            .map(|_| {
                gi.iter()
                    .map(|_| lp.add_var(0.0, (0.0, f64::INFINITY)))
                    .collect()
            })
            .collect();
        for (r, &a) in fi.iter().enumerate() {
            let wa = f.weights()[a];
            lp.add_constraint(
                vars[r]
                    .iter()
                    .map(|v| (*v, 1.0))
                    .collect::<Vec<_>>()
                    .as_slice(),
                ComparisonOp::Eq,
                wa,
            );
            for c in 0..d {
                let row: Vec<_> = vars[r]
                    .iter()
                    .zip(gi)
                    .map(|(v, &b)| (*v, g.points()[b].v[c]))
                    .collect();
                lp.add_constraint(row.as_slice(), ComparisonOp::Eq, wa * f.points()[a].v[c]);
            }
        }
        for (col, &b) in gi.iter().enumerate() {
            let row: Vec<_> = vars.iter().map(|vr| (vr[col], 1.0)).collect();
            lp.add_constraint(row.as_slice(), ComparisonOp::Eq, g.weights()[b]);
        }
        let sol = match lp.solve() {
            Ok(out) => match out.into_solution() {
                Ok(s) => s,
                Err(_) => return Ok(None),
            },
            Err(microlp::Error::Infeasible) => return Ok(None),
            Err(e) => return Err(MfaError::NonConvergence(format!("Strassen LP: {e:?}"))),
        };
        for (r, &a) in fi.iter().enumerate() {
            let wa = f.weights()[a];
            let mut row: Vec<(Vec<f64>, f64)> = Vec::new();
            for (col, &b) in gi.iter().enumerate() {
                let q = sol.var_value(vars[r][col]).max(0.0);
                if q > 0.0 {
                    row.push((g.points()[b].v.clone(), q / wa));
                }
            }
            let tot: f64 = row.iter().map(|e| e.1).sum();
            row.iter_mut().for_each(|e| e.1 /= tot);
            rows[a] = row;
        }
    }
    let kernel = VelocityKernel::new(f.points().to_vec(), rows)?;
    if !is_martingale(&kernel, tol.max(1e-9)) {
        return Ok(None);
    }
    Ok(Some(kernel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::{CustomTerm, Monomial};

    fn atom(v: f64, w: f64) -> (Vec<f64>, Vec<f64>, f64) {
        (vec![0.0], vec![v], w)
    }

    #[test]
    fn simplex_projection() {
        let mut y = vec![0.5, 0.5, 0.5];
        project_simplex(&mut y);
        for v in &y {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let mut y = vec![2.0, 0.0];
        project_simplex(&mut y);
        assert_eq!(y, vec![1.0, 0.0]);
    }

    #[test]
    fn envelope_examples() {
        let xs: Vec<f64> = (0..=40).map(|j| -2.0 + 0.1 * j as f64).collect();
        let convex: Vec<f64> = xs.iter().map(|x| x * x).collect();
        assert_eq!(convex_envelope_1d(&xs, &convex).unwrap(), convex);
        let tw: Vec<f64> = xs.iter().map(|x| (x.abs() - 1.0).abs()).collect();
        let env = convex_envelope_1d(&xs, &tw).unwrap();
        for (x, e) in xs.iter().zip(&env) {
            let want = (x.abs() - 1.0).max(0.0);
            assert!((e - want).abs() < 1e-12, "{x} {e}");
        }
        let vp: Vec<f64> = xs
            .iter()
            .map(|x| 0.25 * (x * x - 1.0) * (x * x - 1.0))
            .collect();
        let env = convex_envelope_1d(&xs, &vp).unwrap();
        for (x, e) in xs.iter().zip(&env) {
            if x.abs() <= 1.0 {
                assert!(e.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noninteracting_examples() {
        let tw = PotentialSpec::two_well();
        let f = DiscreteStatistic::from_atoms(&[atom(0.0, 1.0)]).unwrap();
        assert_eq!(relax_noninteracting(&f, &tw).unwrap(), 0.0);
        let f = DiscreteStatistic::from_atoms(&[atom(2.0, 1.0)]).unwrap();
        assert!((relax_noninteracting(&f, &tw).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn relax_noninteracting_matches_grid_optimum() {
        let f = DiscreteStatistic::from_atoms(&[atom(0.3, 0.6), atom(-1.7, 0.4)]).unwrap();
        let grid = VelocityGrid {
            radius: Some(4.0),
            points: 41,
        };
        let r = relax(
            &f,
            &PotentialSpec::two_well(),
            &PotentialSpec::zero(),
            &grid,
            &RelaxOptions::default(),
        )
        .unwrap();
        let exact = r.exact_grid.unwrap();
        assert!((exact - 0.4 * 0.7).abs() < 1e-9);
        assert!((r.value - exact).abs() < 1e-6, "{} vs {exact}", r.value);
        assert!(r.mixture.is_martingale(1e-9));
    }

    #[test]
    fn variance_penalty_single_atom() {
        let f = DiscreteStatistic::from_atoms(&[atom(1.0, 1.0)]).unwrap();
        let grid = VelocityGrid {
            radius: Some(3.0),
            points: 61,
        };
        let r = relax(
            &f,
            &PotentialSpec::variance_penalty(),
            &PotentialSpec::zero(),
            &grid,
            &RelaxOptions::default(),
        )
        .unwrap();
        assert!(r.value.abs() < 1e-6);
        assert!(r.value <= r.phi + 1e-12);
    }

    #[test]
    fn source_outside_grid_is_infeasible() {
        let f = DiscreteStatistic::from_atoms(&[atom(5.0, 1.0)]).unwrap();
        let grid = VelocityGrid {
            radius: Some(3.0),
            points: 11,
        };
        assert!(matches!(
            relax(
                &f,
                &PotentialSpec::two_well(),
                &PotentialSpec::zero(),
                &grid,
                &RelaxOptions::default()
            ),
            Err(MfaError::InfeasibleGrid(_))
        ));
    }

    fn resting(m: usize) -> PathEnsemble {
        PathEnsemble::new(
            TimeGrid::new(1.0, m).unwrap(),
            vec![vec![vec![0.0]; m + 1]],
            vec![1.0],
        )
        .unwrap()
    }

    fn split_mixture(f: &DiscreteStatistic) -> KernelMixture {
        let up = VelocityKernel::new(f.points().to_vec(), vec![vec![(vec![1.0], 1.0)]]).unwrap();
        let down = VelocityKernel::new(f.points().to_vec(), vec![vec![(vec![-1.0], 1.0)]]).unwrap();
        KernelMixture::new(vec![0.5, 0.5], vec![up, down]).unwrap()
    }

    #[test]
    fn identity_recovery_is_base() {
        let base = resting(3);
        let mixes: Vec<_> = (0..3)
            .map(|i| KernelMixture::identity(&statistic_at_interval(&base, i).unwrap()))
            .collect();
        assert_eq!(
            recovery_ensemble(&base, &mixes, 4, &RecoveryOptions::default()).unwrap(),
            base
        );
    }

    #[test]
    fn zigzag_recovery() {
        let base = resting(2);
        let mixes: Vec<_> = (0..2)
            .map(|i| split_mixture(&statistic_at_interval(&base, i).unwrap()))
            .collect();
        let opts = RecoveryOptions {
            quantum: 2,
            copies: 1,
        };
        let rec = recovery_ensemble(&base, &mixes, 1, &opts).unwrap();
        assert_eq!(rec.len(), 1);
        assert_eq!(rec.grid().steps, 4);
        let p = &rec.paths()[0];
        assert_eq!(
            p.iter().map(|n| n[0]).collect::<Vec<_>>(),
            vec![0.0, 0.25, 0.0, 0.25, 0.0]
        );
    }

    #[test]
    fn recovery_gap_is_first_order_for_x_dependent_potential() {
        // ψ = ¼(v² − 1)² + x: relaxed value 0 at the resting path, recovery
        // copies spend time at x > 0.
        let mono = |c: f64, px: u32, pv: u32| Monomial {
            coeff: c,
            powers: vec![px, pv],
        };
        let psi = PotentialSpec::custom(vec![CustomTerm {
            monomials: vec![
                mono(0.25, 0, 4),
                mono(-0.5, 0, 2),
                mono(0.25, 0, 0),
                mono(1.0, 1, 0),
            ],
            q: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
        }]);
        let base = resting(2);
        let mixes: Vec<_> = (0..2)
            .map(|i| split_mixture(&statistic_at_interval(&base, i).unwrap()))
            .collect();
        let mut gaps = Vec::new();
        for k in [1, 2, 4, 8] {
            let rec = recovery_ensemble(
                &base,
                &mixes,
                k,
                &RecoveryOptions {
                    quantum: 2,
                    copies: 1,
                },
            )
            .unwrap();
            let a = crate::action::action(&rec, &psi, &PotentialSpec::zero())
                .unwrap()
                .total;
            gaps.push(a);
        }
        for w in gaps.windows(2) {
            assert!((w[0] / w[1] - 2.0).abs() < 1e-9, "{gaps:?}");
        }
    }

    #[test]
    fn convex_order_examples() {
        let f = DiscreteStatistic::from_atoms(&[atom(1.0, 0.5), atom(-1.0, 0.5)]).unwrap();
        let g = DiscreteStatistic::from_atoms(&[atom(0.0, 1.0)]).unwrap();
        let fg = convex_order_check(&f, &g, 1e-12).unwrap();
        assert!(!fg.holds);
        assert!(fg.min_gap < 0.0);
        let gf = convex_order_check(&g, &f, 1e-12).unwrap();
        assert!(gf.holds);
        let w = gf.witness.unwrap();
        assert!(is_martingale(&w, 1e-12));
        assert_eq!(apply_kernel(&g, &w).unwrap().len(), 2);
        let same = convex_order_check(&f, &f, 1e-12).unwrap();
        assert!(same.holds);
    }
}
