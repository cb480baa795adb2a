//! One-dimensional Eulerian fields (ρ, V), free-endpoint interacting
//! transport, and the Hamilton-Jacobi-Bellman residual of a field.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MfaError, Result};
use crate::model::{DiscreteStatistic, EndpointCoupling, PathEnsemble, PhasePoint, TimeGrid};
use crate::nbody::{optimize_with, OptimizeOptions};
use crate::potentials::{MeanFieldLagrangian, Model, Potential, PotentialKind, PotentialSpec};

/// Cells below this fraction of the largest cell mass count as empty.
pub const SUPPORT_FLOOR: f64 = 1e-6;

/// Largest particle count accepted by [`solve_free_endpoint`].
pub const MAX_PARTICLES: usize = 10;

/// Cell masses ρ on M + 1 time nodes and cell velocities V on the M
/// intervals of [0, T], over J equal cells of [a, b]. V on interval i belongs
/// to the mass at node i.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EulerianField1D {
    pub a: f64,
    pub b: f64,
    pub cells: usize,
    pub grid: TimeGrid,
    pub rho: Vec<Vec<f64>>,
    pub velocity: Vec<Vec<f64>>,
    /// Continuity residual measured at construction.
    pub continuity_residual: f64,
}

impl EulerianField1D {
    /// Builds a field and rejects it when the continuity residual exceeds `tol`.
    pub fn new(
        a: f64,
        b: f64,
        grid: TimeGrid,
        rho: Vec<Vec<f64>>,
        velocity: Vec<Vec<f64>>,
        tol: f64,
    ) -> Result<Self> {
        let cells = rho.first().map_or(0, |r| r.len());
        if !(a < b) || cells == 0 {
            return Err(MfaError::InvalidInput(
                "field needs a < b and at least one cell".into(),
            ));
        }
        if rho.len() != grid.steps + 1 || velocity.len() != grid.steps {
            return Err(MfaError::InvalidInput(format!(
                "expected {} mass slices and {} velocity slices",
                grid.steps + 1,
                grid.steps
            )));
        }
        for r in rho.iter().chain(&velocity) {
            if r.len() != cells {
                return Err(MfaError::DimensionMismatch {
                    expected: cells,
                    got: r.len(),
                });
            }
            if r.iter().any(|x| !x.is_finite()) {
                return Err(MfaError::NonFinite("field value".into()));
            }
        }
        for (i, r) in rho.iter().enumerate() {
            if r.iter().any(|m| *m < 0.0) {
                return Err(MfaError::InvalidInput(format!(
                    "negative mass in slice {i}"
                )));
            }
            let s: f64 = r.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(MfaError::InvalidInput(format!("slice {i} has mass {s}")));
            }
        }
        let mut field = EulerianField1D {
            a,
            b,
            cells,
            grid,
            rho,
            velocity,
            continuity_residual: 0.0,
        };
        field.continuity_residual = field.measure_continuity();
        if field.continuity_residual > tol {
            return Err(MfaError::InvalidInput(format!(
                "continuity residual {} exceeds tolerance {tol}",
                field.continuity_residual
            )));
        }
        Ok(field)
    }

    pub fn h(&self) -> f64 {
        (self.b - self.a) / self.cells as f64
    }

    pub fn center(&self, j: usize) -> f64 {
        self.a + (j as f64 + 0.5) * self.h()
    }

    fn cell_of(&self, x: f64) -> usize {
        (((x - self.a) / self.h()).floor().max(0.0) as usize).min(self.cells - 1)
    }

    /// Largest W₁ defect, over nodes, between ρ at that node and ρ₀ pushed by
    /// the accumulated upwind fluxes: max_i Σ_b h |C_i(b) − C_0(b) + Σ_{k<i} Δt F_k(b)|,
    /// with C the cumulative mass left of cell boundary b.
    fn measure_continuity(&self) -> f64 {
        let h = self.h();
        let dt = self.grid.dt();
        let j = self.cells;
        let cum = |r: &[f64]| -> Vec<f64> {
            let mut c = vec![0.0; j - 1];
            let mut s = 0.0;
            for b in 0..j - 1 {
                s += r[b];
                c[b] = s;
            }
            c
        };
        let c0 = cum(&self.rho[0]);
        let mut flux = vec![0.0; j - 1];
        let mut worst = 0.0f64;
        for i in 0..self.grid.steps {
            let r = &self.rho[i];
            let v = &self.velocity[i];
            for b in 0..j - 1 {
                flux[b] += dt * (r[b] / h * v[b].max(0.0) + r[b + 1] / h * v[b + 1].min(0.0));
            }
            let ci = cum(&self.rho[i + 1]);
            let defect: f64 = (0..j - 1)
                .map(|b| h * (ci[b] - c0[b] + flux[b]).abs())
                .sum();
            worst = worst.max(defect);
        }
        worst
    }

    /// Atoms (cell centre, V, mass) of interval `i`, empty cells dropped.
    pub fn statistic(&self, i: usize) -> Result<DiscreteStatistic> {
        if i >= self.grid.steps {
            return Err(MfaError::IndexOutOfRange {
                index: i,
                len: self.grid.steps,
            });
        }
        let mut pts = Vec::new();
        let mut w = Vec::new();
        for jj in 0..self.cells {
            if self.rho[i][jj] > 0.0 {
                pts.push(PhasePoint {
                    x: vec![self.center(jj)],
                    v: vec![self.velocity[i][jj]],
                });
                w.push(self.rho[i][jj]);
            }
        }
        DiscreteStatistic::new(pts, w)
    }

    /// CSV rows `t,x,rho,V`; V is empty on the final node.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,x,rho,V\n");
        for i in 0..=self.grid.steps {
            for jj in 0..self.cells {
                let v = if i < self.grid.steps {
                    format!("{:e}", self.velocity[i][jj])
                } else {
                    String::new()
                };
                out.push_str(&format!(
                    "{:e},{:e},{:e},{}\n",
                    self.grid.time(i),
                    self.center(jj),
                    self.rho[i][jj],
                    v
                ));
            }
        }
        out
    }

    /// Reads the output of [`EulerianField1D::to_csv`].
    pub fn from_csv(text: &str, grid: TimeGrid, a: f64, b: f64, tol: f64) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("t,x,rho,V") {
            return Err(MfaError::InvalidInput("missing `t,x,rho,V` header".into()));
        }
        let rows: Vec<&str> = lines.filter(|l| !l.trim().is_empty()).collect();
        let nodes = grid.steps + 1;
        if rows.is_empty() || rows.len() % nodes != 0 {
            return Err(MfaError::InvalidInput(
                "row count is not a multiple of the node count".into(),
            ));
        }
        let cells = rows.len() / nodes;
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| MfaError::InvalidInput(format!("bad number `{s}`")))
        };
        let mut rho = vec![vec![0.0; cells]; nodes];
        let mut vel = vec![vec![0.0; cells]; grid.steps];
        for (r, line) in rows.iter().enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(MfaError::InvalidInput(format!(
                    "expected 4 columns, got {}",
                    cols.len()
                )));
            }
            let (i, jj) = (r / cells, r % cells);
            rho[i][jj] = parse(cols[2])?;
            if i < grid.steps {
                vel[i][jj] = parse(cols[3])?;
            }
        }
        EulerianField1D::new(a, b, grid, rho, vel, tol)
    }
}

/// How an ensemble becomes a field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Collapse {
    /// Nearest-cell binning with conditional-mean velocity.
    #[default]
    Histogram,
    /// Particles read as quantiles of a piecewise-linear quantile function,
    /// which is then binned exactly.
    Quantile,
}

fn check_1d(ens: &PathEnsemble) -> Result<()> {
    if ens.dim() != 1 {
        return Err(MfaError::DimensionMismatch {
            expected: 1,
            got: ens.dim(),
        });
    }
    Ok(())
}

fn finish_slices(mass: Vec<Vec<f64>>, momentum: Vec<Vec<f64>>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let vel = mass
        .iter()
        .zip(&momentum)
        .map(|(m, p)| {
            m.iter()
                .zip(p)
                .map(|(mm, pp)| if *mm > 0.0 { pp / mm } else { 0.0 })
                .collect()
        })
        .collect();
    (mass, vel)
}

/// Eulerian collapse of a 1-D ensemble onto `cells` cells of [a, b].
pub fn collapse(
    ens: &PathEnsemble,
    a: f64,
    b: f64,
    cells: usize,
    mode: Collapse,
) -> Result<EulerianField1D> {
    check_1d(ens)?;
    if cells == 0 || !(a < b) {
        return Err(MfaError::InvalidInput(
            "need a < b and at least one cell".into(),
        ));
    }
    let grid = ens.grid();
    let m = grid.steps;
    let probe = EulerianField1D {
        a,
        b,
        cells,
        grid,
        rho: Vec::new(),
        velocity: Vec::new(),
        continuity_residual: 0.0,
    };
    let w = ens.weights();
    let mut mass = vec![vec![0.0; cells]; m + 1];
    let mut mom = vec![vec![0.0; cells]; m + 1];
    for i in 0..=m {
        let vel: Vec<f64> = (0..ens.len())
            .map(|k| if i < m { ens.velocity(k, i)[0] } else { 0.0 })
            .collect();
        let xs: Vec<f64> = ens.paths().iter().map(|p| p[i][0]).collect();
        match mode {
            Collapse::Histogram => {
                for k in 0..ens.len() {
                    let jj = probe.cell_of(xs[k]);
                    mass[i][jj] += w[k];
                    mom[i][jj] += w[k] * vel[k];
                }
            }
            Collapse::Quantile => quantile_bin(&probe, &xs, &vel, w, &mut mass[i], &mut mom[i]),
        }
    }
    for r in mass.iter_mut() {
        let s: f64 = r.iter().sum();
        r.iter_mut().for_each(|x| *x /= s);
    }
    let (rho, mut velocity) = finish_slices(mass, mom);
    velocity.truncate(m);
    EulerianField1D::new(a, b, grid, rho, velocity, f64::INFINITY)
}

/// Bins the piecewise-linear quantile function through (q_k, x_k), where
/// q_k is the mid-quantile of particle k, extended linearly to q ∈ [0, 1].
/// Velocity is interpolated the same way.
fn quantile_bin(
    field: &EulerianField1D,
    xs: &[f64],
    vs: &[f64],
    w: &[f64],
    mass: &mut [f64],
    mom: &mut [f64],
) {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&p, &q| xs[p].total_cmp(&xs[q]).then(p.cmp(&q)));
    let n = order.len();
    if n == 1 {
        let jj = field.cell_of(xs[0]);
        mass[jj] += 1.0;
        mom[jj] += vs[0];
        return;
    }
    let mut q = Vec::with_capacity(n);
    let mut acc = 0.0;
    for &k in &order {
        q.push(acc + 0.5 * w[k]);
        acc += w[k];
    }
    let x: Vec<f64> = order.iter().map(|&k| xs[k]).collect();
    let v: Vec<f64> = order.iter().map(|&k| vs[k]).collect();
    let extend =
        |q0: f64, q1: f64, y0: f64, y1: f64, at: f64| y0 + (y1 - y0) * (at - q0) / (q1 - q0);
    let mut knots = vec![(
        0.0,
        extend(q[0], q[1], x[0], x[1], 0.0),
        extend(q[0], q[1], v[0], v[1], 0.0),
    )];
    for k in 0..n {
        knots.push((q[k], x[k], v[k]));
    }
    knots.push((
        acc,
        extend(q[n - 2], q[n - 1], x[n - 2], x[n - 1], acc),
        extend(q[n - 2], q[n - 1], v[n - 2], v[n - 1], acc),
    ));
    let h = field.h();
    for seg in knots.windows(2) {
        let (q0, x0, v0) = seg[0];
        let (q1, x1, v1) = seg[1];
        let dq = q1 - q0;
        if dq <= 0.0 {
            continue;
        }
        if x1 == x0 {
            let jj = field.cell_of(x0);
            mass[jj] += dq;
            mom[jj] += dq * 0.5 * (v0 + v1);
            continue;
        }
        let (lo, hi) = (x0.min(x1), x0.max(x1));
        let (j0, j1) = (field.cell_of(lo), field.cell_of(hi));
        for jj in j0..=j1 {
            let cl = if jj == 0 {
                f64::NEG_INFINITY
            } else {
                field.a + jj as f64 * h
            };
            let cr = if jj == field.cells - 1 {
                f64::INFINITY
            } else {
                field.a + (jj + 1) as f64 * h
            };
            let (ol, or) = (lo.max(cl), hi.min(cr));
            if or <= ol {
                continue;
            }
            let share = (or - ol) / (hi - lo) * dq;
            let mid = 0.5 * (ol + or);
            let vm = v0 + (v1 - v0) * (mid - x0) / (x1 - x0);
            mass[jj] += share;
            mom[jj] += share * vm;
        }
    }
}

/// (v, v′)-convexity of ψ₂ decided from the kinds: ψ₂ is convex when
/// σ ≥ 0 and σ + 2β ≥ 0, with σ the least v-curvature of ψ and β that of U.
pub fn psi2_convex(model: &Model) -> bool {
    if model.is_variance_penalty() {
        return false;
    }
    let sigma = match model.psi {
        Potential::Zero | Potential::PositionQuadratic { .. } | Potential::Gaussian { .. } => 0.0,
        Potential::KineticQuadratic { scale } => scale,
        Potential::VelocityQuadratic { alpha } => 2.0 * alpha,
        Potential::Flocking { kappa, .. } => (2.0 * kappa).min(0.0),
        _ => return false,
    };
    let beta = match model.interaction {
        Potential::Zero | Potential::PositionQuadratic { .. } | Potential::Gaussian { .. } => 0.0,
        Potential::KineticQuadratic { scale } => scale,
        Potential::VelocityQuadratic { alpha } => 2.0 * alpha,
        Potential::Flocking { kappa, .. } => (2.0 * kappa).min(0.0),
        _ => return false,
    };
    sigma >= 0.0 && sigma + 2.0 * beta >= 0.0
}

/// Σ_i Δt Φ(f(ρ_i, V_i)), exact for (v, v′)-convex ψ₂ only.
pub fn eulerian_action(
    field: &EulerianField1D,
    spec_psi: &PotentialSpec,
    spec_u: &PotentialSpec,
) -> Result<f64> {
    let model = Model::new(spec_psi, spec_u, 1)?;
    if !psi2_convex(&model) {
        return Err(MfaError::NonConvexPsi2(format!(
            "ψ = {:?}, U = {:?}; the Eulerian energy needs Φ^rel here, use the relaxation module",
            spec_psi.kind, spec_u.kind
        )));
    }
    let dt = field.grid.dt();
    let parts: Result<Vec<f64>> = (0..field.grid.steps)
        .into_par_iter()
        .map(|i| Ok(dt * model.phi(&field.statistic(i)?)))
        .collect();
    Ok(parts?.iter().sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreeEndpointProblem {
    pub a: f64,
    pub b: f64,
    /// Initial and final cell masses on the same J cells of [a, b].
    pub mu0: Vec<f64>,
    pub mu_t: Vec<f64>,
    pub particles: usize,
    #[serde(default)]
    pub collapse: Collapse,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairingResult {
    /// target index assigned to each source atom
    pub pairing: Vec<usize>,
    pub action: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FreeEndpointSolution {
    pub field: EulerianField1D,
    pub ensemble: PathEnsemble,
    pub best: PairingResult,
    pub tried: Vec<PairingResult>,
    pub exhaustive: bool,
    pub eulerian_action: Option<f64>,
}

/// Atoms at the mid-quantiles (k + ½)/N of a piecewise-uniform density.
pub fn quantile_atoms(a: f64, b: f64, masses: &[f64], n: usize) -> Result<Vec<f64>> {
    let total: f64 = masses.iter().sum();
    if masses.is_empty() || masses.iter().any(|m| !(m.is_finite() && *m >= 0.0)) || !(total > 0.0) {
        return Err(MfaError::InvalidInput(
            "cell masses must be nonnegative with positive total".into(),
        ));
    }
    let h = (b - a) / masses.len() as f64;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let q = (k as f64 + 0.5) / n as f64 * total;
        let mut acc = 0.0;
        let mut x = b;
        for (j, m) in masses.iter().enumerate() {
            if *m > 0.0 && acc + m >= q {
                x = a + (j as f64 + (q - acc) / m) * h;
                break;
            }
            acc += m;
        }
        out.push(x);
    }
    Ok(out)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut p: Vec<usize> = (0..n).collect();
    fn rec(k: usize, p: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == p.len() {
            out.push(p.clone());
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            rec(k + 1, p, out);
            p.swap(k, i);
        }
    }
    rec(0, &mut p, &mut out);
    out.sort();
    out
}

/// Minimizes the action over N-particle ensembles whose endpoints are the
/// mid-quantile atoms of μ₀ and μ_T, searching the pairing exhaustively for
/// N ≤ 5 and by 2-opt from the monotone pairing otherwise.
pub fn solve_free_endpoint(
    problem: &FreeEndpointProblem,
    grid: TimeGrid,
    spec_psi: &PotentialSpec,
    spec_u: &PotentialSpec,
    opts: &OptimizeOptions,
) -> Result<FreeEndpointSolution> {
    let n = problem.particles;
    if n == 0 || n > MAX_PARTICLES {
        return Err(MfaError::GuardExceeded(format!(
            "particle count {n} outside 1..={MAX_PARTICLES}"
        )));
    }
    if problem.mu0.len() != problem.mu_t.len() {
        return Err(MfaError::DimensionMismatch {
            expected: problem.mu0.len(),
            got: problem.mu_t.len(),
        });
    }
    let model = Model::new(spec_psi, spec_u, 1)?;
    let src = quantile_atoms(problem.a, problem.b, &problem.mu0, n)?;
    let dst = quantile_atoms(problem.a, problem.b, &problem.mu_t, n)?;
    let evaluate = |pairing: &Vec<usize>| -> Result<(f64, PathEnsemble)> {
        let pairs = (0..n)
            .map(|k| (vec![src[k]], vec![dst[pairing[k]]]))
            .collect();
        let coupling = EndpointCoupling::uniform(pairs)?;
        if grid.steps < 2 {
            let ens = PathEnsemble::straight(&coupling, grid)?;
            let a = crate::action::action_with(&model, &ens)?.total;
            return Ok((a, ens));
        }
        match optimize_with(&model, &coupling, grid, opts) {
            Ok(r) => Ok((r.final_action, r.ensemble)),
            Err(MfaError::LineSearchFailure { best, .. }) => Ok((best.final_action, best.ensemble)),
            Err(e) => Err(e),
        }
    };
    let exhaustive = n <= 5;
    let mut tried = Vec::new();
    let (best_pairing, best_action, best_ens) = if exhaustive {
        let perms = permutations(n);
        let results: Result<Vec<(f64, PathEnsemble)>> = perms.par_iter().map(evaluate).collect();
        let results = results?;
        let mut best = 0;
        for (i, (a, _)) in results.iter().enumerate() {
            tried.push(PairingResult {
                pairing: perms[i].clone(),
                action: *a,
            });
            if *a < results[best].0 {
                best = i;
            }
        }
        let (a, e) = results.into_iter().nth(best).expect("nonempty");
        (perms[best].clone(), a, e)
    } else {
        let mut cur: Vec<usize> = (0..n).collect();
        let (mut cur_a, mut cur_e) = evaluate(&cur)?;
        tried.push(PairingResult {
            pairing: cur.clone(),
            action: cur_a,
        });
        loop {
            let swaps: Vec<(usize, usize)> = (0..n)
                .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
                .collect();
            let cands: Vec<Vec<usize>> = swaps
                .iter()
                .map(|&(i, j)| {
                    let mut p = cur.clone();
                    p.swap(i, j);
                    p
                })
                .collect();
            let results: Result<Vec<(f64, PathEnsemble)>> =
                cands.par_iter().map(evaluate).collect();
            let results = results?;
            let mut improved = None;
            for (c, (a, _)) in cands.iter().zip(&results) {
                tried.push(PairingResult {
                    pairing: c.clone(),
                    action: *a,
                });
            }
            for (i, (a, _)) in results.iter().enumerate() {
                if *a < cur_a - 1e-12 * (1.0 + cur_a.abs())
                    && improved.map_or(true, |b: usize| *a < results[b].0)
                {
                    improved = Some(i);
                }
            }
            match improved {
                Some(i) => {
                    cur = cands[i].clone();
                    let (a, e) = results.into_iter().nth(i).expect("index in range");
                    cur_a = a;
                    cur_e = e;
                }
                None => break,
            }
        }
        (cur, cur_a, cur_e)
    };
    let field = collapse(
        &best_ens,
        problem.a,
        problem.b,
        problem.mu0.len(),
        problem.collapse,
    )?;
    let eulerian = if psi2_convex(&model) {
        Some(eulerian_action(&field, spec_psi, spec_u)?)
    } else {
        None
    };
    Ok(FreeEndpointSolution {
        field,
        ensemble: best_ens,
        best: PairingResult {
            pairing: best_pairing,
            action: best_action,
        },
        tried,
        exhaustive,
        eulerian_action: eulerian,
    })
}

/// L*(x, p) = sup_v p·v − L(x, v) by damped Newton on ∂_vL(x, v) = p.
/// Returns (L*, maximizer).
pub fn legendre(lag: &MeanFieldLagrangian, x: f64, p: f64, v0: f64) -> Result<(f64, f64)> {
    let xs = [x];
    let obj = |v: f64| p * v - lag.eval(&xs, &[v]);
    let mut v = v0;
    for _ in 0..100 {
        let g = p - lag.grad(&xs, &[v]).1[0];
        if g.abs() <= 1e-13 * (1.0 + p.abs()) {
            return Ok((obj(v), v));
        }
        let hvv = lag.hess(&xs, &[v])[(1, 1)];
        if !(hvv > 0.0) {
            return Err(MfaError::ConditionViolation(format!(
                "∂²_vL = {hvv} at x = {x}"
            )));
        }
        let step = g / hvv;
        let base = obj(v);
        let mut t = 1.0;
        while obj(v + t * step) < base - 1e-14 * (1.0 + base.abs()) && t > 1e-10 {
            t *= 0.5;
        }
        v += t * step;
    }
    let g = p - lag.grad(&xs, &[v]).1[0];
    if g.abs() <= 1e-9 * (1.0 + p.abs()) {
        return Ok((obj(v), v));
    }
    Err(MfaError::NewtonFailure(format!(
        "Legendre transform at x = {x}, p = {p}"
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HjbReport {
    /// Times t_{i+1} at which consecutive interval slices are differenced.
    pub times: Vec<f64>,
    /// Ξ of each interval slice at the cell centres, `None` outside the
    /// support; Ξ = 0 at the left end of every support component.
    pub xi: Vec<Vec<Option<f64>>>,
    /// ∂_tΞ + L* − c(t) at each time and interior support cell.
    pub residual: Vec<Vec<Option<f64>>>,
    /// c(t) for each component of the common support at each time
    /// (components narrower than three cells are skipped).
    pub c: Vec<Vec<f64>>,
    pub components: Vec<usize>,
    pub max_deviation: f64,
}

fn runs(mask: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut j = 0;
    while j < mask.len() {
        if mask[j] {
            let s = j;
            while j < mask.len() && mask[j] {
                j += 1;
            }
            out.push((s, j));
        } else {
            j += 1;
        }
    }
    out
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Checks ∂_tΞ + L*_t(x, ∂_xΞ) = c(t) for the potential Ξ with ∂_xΞ = ∂_vL_t(x, V).
pub fn hjb_residual(
    field: &EulerianField1D,
    spec_psi: &PotentialSpec,
    spec_u: &PotentialSpec,
) -> Result<HjbReport> {
    let model = Model::new(spec_psi, spec_u, 1)?;
    model.require_smooth()?;
    let m = field.grid.steps;
    let j = field.cells;
    let dt = field.grid.dt();
    struct Slice {
        /// component index, Ξ and L* interpolated to each cell centre
        at_cell: Vec<Option<(usize, f64, f64)>>,
    }
    // V on interval i is the velocity over [t_i, t_{i+1}]; it is placed at the
    // mid-interval position x + ½ΔtV and time t_{i+½}.
    let slices: Result<Vec<Slice>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let rho = &field.rho[i];
            let vel = &field.velocity[i];
            let top = rho.iter().cloned().fold(0.0, f64::max);
            let support: Vec<bool> = rho.iter().map(|r| *r > SUPPORT_FLOOR * top).collect();
            let y: Vec<f64> = (0..j)
                .map(|jj| field.center(jj) + 0.5 * dt * vel[jj])
                .collect();
            let atoms: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..j)
                .filter(|&jj| rho[jj] > 0.0)
                .map(|jj| (vec![y[jj]], vec![vel[jj]], rho[jj]))
                .collect();
            let lag = MeanFieldLagrangian::from_model(
                model.clone(),
                DiscreteStatistic::from_atoms(&atoms)?,
            )?;
            let mut p = vec![0.0; j];
            let mut lstar = vec![0.0; j];
            for jj in 0..j {
                if support[jj] {
                    p[jj] = lag.grad(&[y[jj]], &[vel[jj]]).1[0];
                    lstar[jj] = legendre(&lag, y[jj], p[jj], vel[jj])?.0;
                }
            }
            let mut at_cell = vec![None; j];
            for (comp, (s, e)) in runs(&support).into_iter().enumerate() {
                let mut xi = vec![0.0; e - s];
                for jj in (s + 1)..e {
                    if y[jj] <= y[jj - 1] {
                        return Err(MfaError::ConditionViolation(format!(
                            "mid-interval positions cross at slice {i}; refine the time grid"
                        )));
                    }
                    xi[jj - s] = xi[jj - s - 1] + 0.5 * (y[jj] - y[jj - 1]) * (p[jj - 1] + p[jj]);
                }
                let mut k = s;
                for (cell, slot) in at_cell.iter_mut().enumerate() {
                    let x = field.center(cell);
                    if x < y[s] || x > y[e - 1] {
                        continue;
                    }
                    while k + 1 < e - 1 && y[k + 1] < x {
                        k += 1;
                    }
                    let (xv, lv) = if e - s == 1 {
                        (xi[0], lstar[s])
                    } else {
                        let w = (x - y[k]) / (y[k + 1] - y[k]);
                        (
                            (1.0 - w) * xi[k - s] + w * xi[k + 1 - s],
                            (1.0 - w) * lstar[k] + w * lstar[k + 1],
                        )
                    };
                    *slot = Some((comp, xv, lv));
                }
            }
            Ok(Slice { at_cell })
        })
        .collect();
    let slices = slices?;
    let mut times = Vec::new();
    let mut residual = Vec::new();
    let mut cs = Vec::new();
    let mut comps = Vec::new();
    let mut max_dev = 0.0f64;
    for i in 0..m.saturating_sub(1) {
        let (s0, s1) = (&slices[i], &slices[i + 1]);
        let key: Vec<Option<(usize, usize)>> = (0..j)
            .map(|jj| match (s0.at_cell[jj], s1.at_cell[jj]) {
                (Some(a), Some(b)) => Some((a.0, b.0)),
                _ => None,
            })
            .collect();
        let mut pieces = Vec::new();
        let mut jj = 0;
        while jj < j {
            if let Some(kk) = key[jj] {
                let st = jj;
                while jj < j && key[jj] == Some(kk) {
                    jj += 1;
                }
                pieces.push((st, jj));
            } else {
                jj += 1;
            }
        }
        let mut row = vec![None; j];
        let mut crow = Vec::new();
        for &(s, e) in &pieces {
            // edge cells are cut by the free boundary; only interior cells are checked
            if e - s < 3 {
                continue;
            }
            let (s, e) = (s + 1, e - 1);
            let vals: Vec<f64> = (s..e)
                .map(|jj| {
                    let (_, x0, l0) = s0.at_cell[jj].expect("in support");
                    let (_, x1, l1) = s1.at_cell[jj].expect("in support");
                    (x1 - x0) / dt + 0.5 * (l0 + l1)
                })
                .collect();
            let c = median(&mut vals.clone());
            for (off, val) in vals.iter().enumerate() {
                let r = val - c;
                max_dev = max_dev.max(r.abs());
                row[s + off] = Some(r);
            }
            crow.push(c);
        }
        times.push(field.grid.time(i + 1));
        residual.push(row);
        cs.push(crow);
        comps.push(pieces.len());
    }
    Ok(HjbReport {
        times,
        xi: slices
            .into_iter()
            .map(|s| s.at_cell.into_iter().map(|c| c.map(|c| c.1)).collect())
            .collect(),
        residual,
        c: cs,
        components: comps,
        max_deviation: max_dev,
    })
}

/// The kind names accepted by [`hjb_residual`] and [`eulerian_action`] for ψ.
pub fn is_supported_psi(kind: PotentialKind) -> bool {
    !matches!(
        kind,
        PotentialKind::VariancePenalty | PotentialKind::TwoWell | PotentialKind::TwoWellInteraction
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinetic() -> PotentialSpec {
        PotentialSpec::quadratic_kinetic()
    }

    fn moving_cell(v: f64, steps: usize, t: f64) -> EulerianField1D {
        let grid = TimeGrid::new(t, steps).unwrap();
        let cells = 40;
        let mut rho = vec![vec![0.0; cells]; steps + 1];
        for r in rho.iter_mut() {
            r[10] = 1.0;
        }
        let vel = vec![vec![v; cells]; steps];
        EulerianField1D::new(-2.0, 2.0, grid, rho, vel, f64::INFINITY).unwrap()
    }

    #[test]
    fn moving_cell_action() {
        let f = moving_cell(0.7, 10, 2.0);
        let a = eulerian_action(&f, &kinetic(), &PotentialSpec::zero()).unwrap();
        assert!((a - 0.5 * 0.49 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn stationary_interaction_only() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let mut rho = vec![vec![0.0; 4]; 5];
        for r in rho.iter_mut() {
            r[0] = 0.5;
            r[3] = 0.5;
        }
        let f = EulerianField1D::new(0.0, 4.0, grid, rho, vec![vec![0.0; 4]; 4], 1e-12).unwrap();
        // centres 0.5 and 3.5: ½⟨f, U∗f⟩ = ½·2·¼·κ·9 with κ = 1.
        let a = eulerian_action(&f, &kinetic(), &PotentialSpec::quadratic_position(1.0)).unwrap();
        assert!((a - 2.25).abs() < 1e-12);
    }

    #[test]
    fn nonconvex_rejected() {
        let f = moving_cell(0.0, 2, 1.0);
        assert!(matches!(
            eulerian_action(&f, &PotentialSpec::two_well(), &PotentialSpec::zero()),
            Err(MfaError::NonConvexPsi2(_))
        ));
        assert!(matches!(
            eulerian_action(&f, &kinetic(), &PotentialSpec::velocity_quadratic(-0.5)),
            Err(MfaError::NonConvexPsi2(_))
        ));
        assert!(eulerian_action(&f, &kinetic(), &PotentialSpec::velocity_quadratic(-0.25)).is_ok());
    }

    #[test]
    fn single_cell_free_endpoint_is_stationary() {
        let mut mu = vec![0.0; 8];
        mu[3] = 1.0;
        let pb = FreeEndpointProblem {
            a: 0.0,
            b: 8.0,
            mu0: mu.clone(),
            mu_t: mu,
            particles: 1,
            collapse: Collapse::Histogram,
        };
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let s = solve_free_endpoint(
            &pb,
            grid,
            &kinetic(),
            &PotentialSpec::quadratic_position(1.0),
            &OptimizeOptions::default(),
        )
        .unwrap();
        assert!(s.field.velocity.iter().all(|r| r.iter().all(|v| *v == 0.0)));
        assert!(s.best.action.abs() < 1e-12);
    }

    #[test]
    fn free_transport_hjb_is_exact() {
        // Uniform block moving at constant V: Ξ = Vx − ½V²t.
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let cells = 64;
        let v = 0.5;
        let rho: Vec<Vec<f64>> = (0..=8)
            .map(|_| {
                (0..cells)
                    .map(|j| {
                        if (16..48).contains(&j) {
                            1.0 / 32.0
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        let f = EulerianField1D::new(-1.0, 1.0, grid, rho, vec![vec![v; cells]; 8], f64::INFINITY)
            .unwrap();
        let r = hjb_residual(&f, &kinetic(), &PotentialSpec::zero()).unwrap();
        assert!(r.max_deviation < 1e-12);
        for c in &r.c {
            assert!((c[0] - 0.5 * v * v).abs() < 1e-12);
        }
        let xi = &r.xi[0];
        assert!((xi[20].unwrap() - v * (4.0 * f.h() - 0.5 * f.grid.dt() * v)).abs() < 1e-12);
    }

    #[test]
    fn legendre_involution() {
        let f = DiscreteStatistic::from_atoms(&[
            (vec![0.3], vec![1.0], 0.4),
            (vec![-0.5], vec![-0.2], 0.6),
        ])
        .unwrap();
        let model = Model::new(&kinetic(), &PotentialSpec::flocking(0.5, 1.0), 1).unwrap();
        let lag = MeanFieldLagrangian::from_model(model, f).unwrap();
        for (x, v) in [(0.0, 0.0), (0.7, 1.3), (-1.2, -2.0)] {
            let p = lag.grad(&[x], &[v]).1[0];
            let (ls, vstar) = legendre(&lag, x, p, 0.0).unwrap();
            assert!((vstar - v).abs() < 1e-9);
            assert!((p * v - ls - lag.eval(&[x], &[v])).abs() < 1e-8);
        }
    }

    #[test]
    fn quantile_atoms_uniform() {
        let q = quantile_atoms(0.0, 1.0, &[0.25; 4], 4).unwrap();
        for (k, x) in q.iter().enumerate() {
            assert!((x - (k as f64 + 0.5) / 4.0).abs() < 1e-15);
        }
    }
}
