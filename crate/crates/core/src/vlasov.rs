//! Generalized Vlasov flow of an atom cloud: implicit acceleration field,
//! characteristics in (x, p) with Picard iteration over sub-horizons, weak
//! residuals and W₁ stability.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MfaError, Result};
use crate::model::{DiscreteStatistic, PhasePoint, TimeGrid};
use crate::nbody::min_vv_eigenvalue;
use crate::potentials::{Model, PotentialSpec};
use crate::wasserstein::{wp, Metric};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccelerationField {
    pub accelerations: Vec<Vec<f64>>,
    /// ∞-norm residual of the assembled linear system.
    pub residual: f64,
}

pub fn acceleration(
    f: &DiscreteStatistic,
    spec_psi: &PotentialSpec,
    spec_u: &PotentialSpec,
) -> Result<AccelerationField> {
    let model = Model::new(spec_psi, spec_u, f.dim())?;
    let xs: Vec<Vec<f64>> = f.points().iter().map(|p| p.x.clone()).collect();
    let vs: Vec<Vec<f64>> = f.points().iter().map(|p| p.v.clone()).collect();
    acceleration_with(&model, &xs, &vs, f.weights())
}

/// Solves, for every atom k,
/// (∇_v∇_vL)(z_k) a_k − Σ_j w_j ∇_v∇_vU(z_k − z_j) a_j
///   = ∇_xL(z_k) − ∇_x∇_vL(z_k) v_k + Σ_j w_j ∇_x∇_vU(z_k − z_j) v_j.
pub fn acceleration_with(
    model: &Model,
    xs: &[Vec<f64>],
    vs: &[Vec<f64>],
    w: &[f64],
) -> Result<AccelerationField> {
    model.require_smooth()?;
    let n = xs.len();
    let d = model.dim();
    let lowest = min_vv_eigenvalue(model, xs, vs, w);
    if !(lowest > 0.0) {
        return Err(MfaError::ConditionViolation(format!(
            "∇_v∇_v L[f] is not positive definite at the atoms (eigenvalue {lowest:e})"
        )));
    }
    let (gx, _) = model.lagrangian_grads_at_atoms(xs, vs, w);
    let mut a = DMatrix::zeros(n * d, n * d);
    let mut rhs = DVector::zeros(n * d);
    let mut dx = vec![0.0; d];
    let mut dv = vec![0.0; d];
    for k in 0..n {
        let hp = model.psi_hess(&xs[k], &vs[k]);
        for r in 0..d {
            rhs[k * d + r] = gx[k][r];
            for c in 0..d {
                a[(k * d + r, k * d + c)] += hp[(d + r, d + c)];
                // ∇_x∇_v ψ acting on v_k; row is the v-component.
                rhs[k * d + r] -= hp[(d + r, c)] * vs[k][c];
            }
        }
        for j in 0..n {
            for c in 0..d {
                dx[c] = xs[k][c] - xs[j][c];
                dv[c] = vs[k][c] - vs[j][c];
            }
            let hu = model.u_hess(&dx, &dv);
            for r in 0..d {
                for c in 0..d {
                    let vv = w[j] * hu[(d + r, d + c)];
                    let vx = w[j] * hu[(d + r, c)];
                    a[(k * d + r, k * d + c)] += vv;
                    a[(k * d + r, j * d + c)] -= vv;
                    rhs[k * d + r] -= vx * (vs[k][c] - vs[j][c]);
                }
            }
        }
    }
    let sol = match a.clone().lu().solve(&rhs) {
        Some(s) if s.iter().all(|c| c.is_finite()) => s,
        _ => {
            let sv = a.clone().singular_values();
            return Err(MfaError::SingularSystem {
                smallest_singular_value: sv.min(),
            });
        }
    };
    let residual = (&a * &sol - &rhs).amax();
    let scale = 1.0 + rhs.amax() + a.amax() * sol.amax();
    if !(residual <= 1e-10 * scale) {
        let sv = a.singular_values();
        return Err(MfaError::SingularSystem {
            smallest_singular_value: sv.min(),
        });
    }
    Ok(AccelerationField {
        accelerations: (0..n)
            .map(|k| (0..d).map(|c| sol[k * d + c]).collect())
            .collect(),
        residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VlasovOptions {
    /// Picard stops when sup_t W₁ between successive iterates drops below this.
    pub fptol: f64,
    pub max_picard: usize,
    pub newton_tol: f64,
}

impl Default for VlasovOptions {
    fn default() -> Self {
        VlasovOptions {
            fptol: 1e-12,
            max_picard: 60,
            newton_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubHorizon {
    pub start_step: usize,
    pub steps: usize,
    pub picard_iterations: usize,
    /// Largest observed ratio d_{n+1}/d_n.
    pub contraction_factor: f64,
    pub final_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CharacteristicFlow {
    pub f0: DiscreteStatistic,
    pub grid: TimeGrid,
    /// `x[i][k]` is the position of atom k at node i.
    pub x: Vec<Vec<Vec<f64>>>,
    pub p: Vec<Vec<Vec<f64>>>,
    pub v: Vec<Vec<Vec<f64>>>,
    pub sub_horizons: Vec<SubHorizon>,
    #[serde(skip)]
    psi: PotentialSpec,
    #[serde(skip)]
    u: PotentialSpec,
}

impl CharacteristicFlow {
    pub fn weights(&self) -> &[f64] {
        self.f0.weights()
    }

    pub fn statistic(&self, i: usize) -> DiscreteStatistic {
        let pts = self.x[i]
            .iter()
            .zip(&self.v[i])
            .map(|(x, v)| PhasePoint {
                x: x.clone(),
                v: v.clone(),
            })
            .collect();
        DiscreteStatistic::new(pts, self.weights().to_vec()).expect("flow statistic is valid")
    }

    pub fn model(&self) -> Result<Model> {
        Model::new(&self.psi, &self.u, self.f0.dim())
    }

    /// max over nodes and atoms of |∇_vL[f_{t_i}](x_k, v_k) − p_k|.
    pub fn recovery_defect(&self) -> Result<f64> {
        let model = self.model()?;
        let mut worst: f64 = 0.0;
        for i in 0..self.x.len() {
            let (_, gv) = model.lagrangian_grads_at_atoms(&self.x[i], &self.v[i], self.weights());
            for k in 0..gv.len() {
                for c in 0..gv[k].len() {
                    worst = worst.max((gv[k][c] - self.p[i][k][c]).abs());
                }
            }
        }
        Ok(worst)
    }
}

/// Stage states of one Picard iterate over a sub-horizon: `rec[step][s]`
/// holds (positions, velocities) of all atoms at RK4 stage s = 0..4 of the
/// step, and `rec[step][4]` the node at the end of the step.
type StageRecord = Vec<[(Vec<Vec<f64>>, Vec<Vec<f64>>); 5]>;

const STAGE_OFFSETS: [f64; 5] = [0.0, 0.5, 0.5, 1.0, 1.0];

struct Frozen<'a> {
    model: &'a Model,
    xs: &'a [Vec<f64>],
    vs: &'a [Vec<f64>],
    w: &'a [f64],
}

impl Frozen<'_> {
    /// ∇_xL and ∇_vL of L[f] at (x, v) for the frozen statistic f.
    fn grads(&self, x: &[f64], v: &[f64], gx: &mut [f64], gv: &mut [f64]) {
        let d = x.len();
        gx.iter_mut().for_each(|c| *c = 0.0);
        gv.iter_mut().for_each(|c| *c = 0.0);
        self.model.add_psi_grad(x, v, 1.0, gx, gv);
        let mut dx = vec![0.0; d];
        let mut dv = vec![0.0; d];
        for j in 0..self.xs.len() {
            for c in 0..d {
                dx[c] = x[c] - self.xs[j][c];
                dv[c] = v[c] - self.vs[j][c];
            }
            self.model.add_u_grad(&dx, &dv, self.w[j], gx, gv);
        }
    }

    fn hess_vv(&self, x: &[f64], v: &[f64]) -> DMatrix<f64> {
        let d = x.len();
        let h = self.model.psi_hess(x, v);
        let mut out = h.view((d, d), (d, d)).into_owned();
        let mut dx = vec![0.0; d];
        let mut dv = vec![0.0; d];
        for j in 0..self.xs.len() {
            for c in 0..d {
                dx[c] = x[c] - self.xs[j][c];
                dv[c] = v[c] - self.vs[j][c];
            }
            let hu = self.model.u_hess(&dx, &dv);
            out += hu.view((d, d), (d, d)) * self.w[j];
        }
        out
    }

    /// Solves ∇_vL[f](x, v) = p for v by Newton from `guess`.
    fn recover_velocity(&self, x: &[f64], p: &[f64], guess: &[f64], tol: f64) -> Result<Vec<f64>> {
        let d = x.len();
        let mut v = guess.to_vec();
        let mut gx = vec![0.0; d];
        let mut gv = vec![0.0; d];
        let scale = 1.0 + p.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        for _ in 0..60 {
            self.grads(x, &v, &mut gx, &mut gv);
            let r: Vec<f64> = gv.iter().zip(p).map(|(a, b)| a - b).collect();
            let rn = r.iter().fold(0.0f64, |m, c| m.max(c.abs()));
            if rn <= tol * scale {
                return Ok(v);
            }
            let h = self.hess_vv(x, &v);
            let step = h
                .lu()
                .solve(&DVector::from_vec(r))
                .ok_or_else(|| MfaError::NewtonFailure("singular ∇_v∇_v L".into()))?;
            for c in 0..d {
                v[c] -= step[c];
            }
            if v.iter().any(|c| !c.is_finite()) {
                return Err(MfaError::NewtonFailure("non-finite iterate".into()));
            }
        }
        Err(MfaError::NewtonFailure(format!(
            "no convergence to {tol:e} in 60 steps"
        )))
    }
}

struct Integrated {
    record: StageRecord,
    node_p: Vec<Vec<Vec<f64>>>,
}

type AtomTrack = (Vec<[(Vec<f64>, Vec<f64>); 5]>, Vec<Vec<f64>>);

/// One Picard map: characteristics of atom k from (x₀, p₀) against the frozen
/// stage record `prev`. At a fixed point every stage state of every atom
/// coincides with its frozen copy, so the scheme is classical RK4 on the
/// coupled system.
#[allow(clippy::too_many_arguments)]
fn picard_map(
    model: &Model,
    w: &[f64],
    prev: &StageRecord,
    x0: &[Vec<f64>],
    p0: &[Vec<f64>],
    v0: &[Vec<f64>],
    dt: f64,
    tol: f64,
) -> Result<Integrated> {
    let n = x0.len();
    let d = model.dim();
    let steps = prev.len();
    let per_atom: Vec<Result<AtomTrack>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let mut x = x0[k].clone();
            let mut p = p0[k].clone();
            let mut v = v0[k].clone();
            let mut stages = Vec::with_capacity(steps);
            let mut momenta = Vec::with_capacity(steps);
            let mut gx = vec![0.0; d];
            let mut gv = vec![0.0; d];
            for frozen in prev.iter() {
                let mut kx = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
                let mut kp = kx.clone();
                let mut st: [(Vec<f64>, Vec<f64>); 5] = Default::default();
                for s in 0..4 {
                    let field = Frozen {
                        model,
                        xs: &frozen[s].0,
                        vs: &frozen[s].1,
                        w,
                    };
                    let (xs, vs) = if s == 0 {
                        (x.clone(), v.clone())
                    } else {
                        let h = STAGE_OFFSETS[s] * dt;
                        let xs: Vec<f64> = (0..d).map(|c| x[c] + h * kx[s - 1][c]).collect();
                        let ps: Vec<f64> = (0..d).map(|c| p[c] + h * kp[s - 1][c]).collect();
                        let vs = field.recover_velocity(&xs, &ps, &frozen[s].1[k], tol)?;
                        (xs, vs)
                    };
                    field.grads(&xs, &vs, &mut gx, &mut gv);
                    kx[s].copy_from_slice(&vs);
                    kp[s].copy_from_slice(&gx);
                    st[s] = (xs, vs);
                }
                for c in 0..d {
                    x[c] += dt / 6.0 * (kx[0][c] + 2.0 * kx[1][c] + 2.0 * kx[2][c] + kx[3][c]);
                    p[c] += dt / 6.0 * (kp[0][c] + 2.0 * kp[1][c] + 2.0 * kp[2][c] + kp[3][c]);
                }
                let field = Frozen {
                    model,
                    xs: &frozen[4].0,
                    vs: &frozen[4].1,
                    w,
                };
                v = field.recover_velocity(&x, &p, &frozen[4].1[k], tol)?;
                st[4] = (x.clone(), v.clone());
                stages.push(st);
                momenta.push(p.clone());
            }
            Ok((stages, momenta))
        })
        .collect();
    let mut record: StageRecord = (0..steps)
        .map(|_| std::array::from_fn(|_| (Vec::with_capacity(n), Vec::with_capacity(n))))
        .collect();
    let mut node_p = vec![Vec::with_capacity(n); steps];
    for res in per_atom {
        let (stages, momenta) = res?;
        for (step, st) in stages.into_iter().enumerate() {
            for (s, (xs, vs)) in st.into_iter().enumerate() {
                record[step][s].0.push(xs);
                record[step][s].1.push(vs);
            }
        }
        for (step, p) in momenta.into_iter().enumerate() {
            node_p[step].push(p);
        }
    }
    Ok(Integrated { record, node_p })
}

fn free_flight(x0: &[Vec<f64>], v0: &[Vec<f64>], steps: usize, dt: f64) -> StageRecord {
    (0..steps)
        .map(|step| {
            std::array::from_fn(|s| {
                let t = (step as f64 + STAGE_OFFSETS[s]) * dt;
                let xs = x0
                    .iter()
                    .zip(v0)
                    .map(|(x, v)| x.iter().zip(v).map(|(a, b)| a + t * b).collect())
                    .collect();
                (xs, v0.to_vec())
            })
        })
        .collect()
}

fn phase_w1(
    w: &[f64],
    xa: &[Vec<f64>],
    va: &[Vec<f64>],
    xb: &[Vec<f64>],
    vb: &[Vec<f64>],
) -> Result<f64> {
    let mk = |xs: &[Vec<f64>], vs: &[Vec<f64>]| {
        let pts = xs
            .iter()
            .zip(vs)
            .map(|(x, v)| PhasePoint {
                x: x.clone(),
                v: v.clone(),
            })
            .collect();
        DiscreteStatistic::new(pts, w.to_vec())
    };
    Ok(wp(&mk(xa, va)?, &mk(xb, vb)?, 1.0, Metric::Phase)?.0)
}

/// Distances below this are treated as converged noise when estimating
/// contraction factors.
const NOISE_FLOOR: f64 = 1e-13;

pub fn dobrushin_solve(
    f0: &DiscreteStatistic,
    grid: TimeGrid,
    spec_psi: &PotentialSpec,
    spec_u: &PotentialSpec,
    opts: &VlasovOptions,
) -> Result<CharacteristicFlow> {
    let model = Model::new(spec_psi, spec_u, f0.dim())?;
    model.require_smooth()?;
    if !(opts.fptol > 0.0) || opts.max_picard == 0 {
        return Err(MfaError::InvalidInput(
            "fptol must be positive and max_picard ≥ 1".into(),
        ));
    }
    let w = f0.weights();
    let mut x: Vec<Vec<f64>> = f0.points().iter().map(|p| p.x.clone()).collect();
    let mut v: Vec<Vec<f64>> = f0.points().iter().map(|p| p.v.clone()).collect();
    let lowest = min_vv_eigenvalue(&model, &x, &v, w);
    if !(lowest > 0.0) {
        return Err(MfaError::ConditionViolation(format!(
            "∇_v∇_v L[f₀] is not positive definite (eigenvalue {lowest:e})"
        )));
    }
    let (_, p0) = model.lagrangian_grads_at_atoms(&x, &v, w);
    let mut p = p0;
    let dt = grid.dt();

    let mut all_x = vec![x.clone()];
    let mut all_p = vec![p.clone()];
    let mut all_v = vec![v.clone()];
    let mut subs = Vec::new();
    let mut start = 0usize;
    let mut len = grid.steps;
    while start < grid.steps {
        let steps = len.min(grid.steps - start);
        let mut prev = free_flight(&x, &v, steps, dt);
        let mut last_d = f64::NAN;
        let mut factor: f64 = 0.0;
        let mut accepted: Option<(Integrated, usize, f64)> = None;
        let mut halve = false;
        for iter in 1..=opts.max_picard {
            let next = picard_map(&model, w, &prev, &x, &p, &v, dt, opts.newton_tol)?;
            let mut d: f64 = 0.0;
            for i in 0..steps {
                let (a, b) = (&prev[i][4], &next.record[i][4]);
                d = d.max(phase_w1(w, &a.0, &a.1, &b.0, &b.1)?);
            }
            if last_d.is_finite() && last_d > NOISE_FLOOR && d > NOISE_FLOOR {
                let ratio = d / last_d;
                factor = factor.max(ratio);
                if ratio >= 0.5 && steps > 1 {
                    halve = true;
                    break;
                }
            }
            last_d = d;
            if d < opts.fptol {
                accepted = Some((next, iter, d));
                break;
            }
            prev = next.record;
        }
        if halve {
            len = (steps / 2).max(1);
            continue;
        }
        let Some((res, iters, d)) = accepted else {
            if steps > 1 {
                len = (steps / 2).max(1);
                continue;
            }
            return Err(MfaError::PicardNonConvergence { factor });
        };
        subs.push(SubHorizon {
            start_step: start,
            steps,
            picard_iterations: iters,
            contraction_factor: factor,
            final_distance: d,
        });
        for i in 0..steps {
            all_x.push(res.record[i][4].0.clone());
            all_p.push(res.node_p[i].clone());
            all_v.push(res.record[i][4].1.clone());
        }
        x = res.record[steps - 1][4].0.clone();
        p = res.node_p[steps - 1].clone();
        v = res.record[steps - 1][4].1.clone();
        start += steps;
    }
    Ok(CharacteristicFlow {
        f0: f0.clone(),
        grid,
        x: all_x,
        p: all_p,
        v: all_v,
        sub_horizons: subs,
        psi: spec_psi.clone(),
        u: spec_u.clone(),
    })
}

fn bump(s: f64) -> (f64, f64) {
    if s.abs() >= 1.0 {
        return (0.0, 0.0);
    }
    let q = 1.0 - s * s;
    let b = (1.0 - 1.0 / q).exp();
    (b, b * (-2.0 * s / (q * q)))
}

/// Smooth compactly supported test function
/// φ(t, x, v) = β((t − t_c)/r_t) Π_c β((x_c − a_c)/r_x) β((v_c − b_c)/r_v),
/// β(s) = exp(1 − 1/(1 − s²)) on |s| < 1. `time_radius = None` drops the time
/// factor, and `phase_radius = None` drops the phase-space factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestBump {
    pub time_center: f64,
    pub time_radius: Option<f64>,
    pub x_center: Vec<f64>,
    pub v_center: Vec<f64>,
    /// (r_x, r_v)
    pub phase_radius: Option<(f64, f64)>,
}

impl TestBump {
    /// (φ, ∂_tφ, ∇_xφ, ∇_vφ)
    fn eval(&self, t: f64, x: &[f64], v: &[f64]) -> (f64, f64, Vec<f64>, Vec<f64>) {
        let d = x.len();
        let (bt, dbt) = match self.time_radius {
            Some(r) => {
                let (b, db) = bump((t - self.time_center) / r);
                (b, db / r)
            }
            None => (1.0, 0.0),
        };
        let Some((rx, rv)) = self.phase_radius else {
            return (bt, dbt, vec![0.0; d], vec![0.0; d]);
        };
        let fx: Vec<(f64, f64)> = (0..d)
            .map(|c| bump((x[c] - self.x_center[c]) / rx))
            .collect();
        let fv: Vec<(f64, f64)> = (0..d)
            .map(|c| bump((v[c] - self.v_center[c]) / rv))
            .collect();
        let space: f64 = fx.iter().chain(&fv).map(|f| f.0).product();
        let partial = |list: &[(f64, f64)], c: usize, r: f64, other: &[(f64, f64)]| -> f64 {
            let mut out = list[c].1 / r;
            for (j, f) in list.iter().enumerate() {
                if j != c {
                    out *= f.0;
                }
            }
            out * other.iter().map(|f| f.0).product::<f64>()
        };
        let gx = (0..d).map(|c| bt * partial(&fx, c, rx, &fv)).collect();
        let gv = (0..d).map(|c| bt * partial(&fv, c, rv, &fx)).collect();
        (bt * space, dbt * space, gx, gv)
    }
}

/// A default family: for three time windows of half-width T/4 inside (0, T),
/// bumps centred at every atom of the flow at the window centre. Each radius
/// is twice the largest excursion of any atom from that centre within the
/// window, floored at `min_radius`, so the bumps are resolved by the time
/// grid. One more bump is constant in phase space.
pub fn standard_bumps(flow: &CharacteristicFlow, min_radius: f64) -> Vec<TestBump> {
    let t_end = flow.grid.horizon;
    let m = flow.grid.steps;
    let d = flow.f0.dim();
    let mut out = Vec::new();
    for q in [1usize, 2, 3] {
        let tc = t_end * q as f64 / 4.0;
        let node = (m * q) / 4;
        let (lo, hi) = ((m * (q - 1)) / 4, ((m * (q + 1)) / 4).min(m));
        for k in 0..flow.x[node].len() {
            let (xc, vc) = (&flow.x[node][k], &flow.v[node][k]);
            let (mut ex, mut ev): (f64, f64) = (0.0, 0.0);
            for i in lo..=hi {
                for j in 0..flow.x[i].len() {
                    for c in 0..d {
                        ex = ex.max((flow.x[i][j][c] - xc[c]).abs());
                        ev = ev.max((flow.v[i][j][c] - vc[c]).abs());
                    }
                }
            }
            out.push(TestBump {
                time_center: tc,
                time_radius: Some(t_end / 4.0),
                x_center: xc.clone(),
                v_center: vc.clone(),
                phase_radius: Some(((2.0 * ex).max(min_radius), (2.0 * ev).max(min_radius))),
            });
        }
    }
    out.push(TestBump {
        time_center: 0.5 * t_end,
        time_radius: Some(0.5 * t_end),
        x_center: vec![0.0; d],
        v_center: vec![0.0; d],
        phase_radius: None,
    });
    out
}

/// max over `tests` of |Σ_i Δt Σ_k w_k (∂_tφ + v·∇_xφ + A[f_t]·∇_vφ)(t_i, x_k, v_k)|.
pub fn weak_vlasov_residual(flow: &CharacteristicFlow, tests: &[TestBump]) -> Result<f64> {
    let model = flow.model()?;
    let w = flow.weights();
    let d = flow.f0.dim();
    for t in tests {
        if t.x_center.len() != d || t.v_center.len() != d {
            return Err(MfaError::DimensionMismatch {
                expected: d,
                got: t.x_center.len(),
            });
        }
    }
    let dt = flow.grid.dt();
    let accels: Vec<Vec<Vec<f64>>> = (0..=flow.grid.steps)
        .into_par_iter()
        .map(|i| acceleration_with(&model, &flow.x[i], &flow.v[i], w).map(|a| a.accelerations))
        .collect::<Result<_>>()?;
    let mut worst: f64 = 0.0;
    for test in tests {
        let mut s = 0.0;
        for i in 0..=flow.grid.steps {
            // Trapezoid weights; the integrand vanishes at both ends for
            // time-compact bumps.
            let wt = if i == 0 || i == flow.grid.steps {
                0.5 * dt
            } else {
                dt
            };
            let t = flow.grid.time(i);
            for k in 0..w.len() {
                let (_, phit, gx, gv) = test.eval(t, &flow.x[i][k], &flow.v[i][k]);
                let mut g = phit;
                for c in 0..d {
                    g += flow.v[i][k][c] * gx[c] + accels[i][k][c] * gv[c];
                }
                s += wt * w[k] * g;
            }
        }
        worst = worst.max(s.abs());
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub times: Vec<f64>,
    pub ratios: Vec<f64>,
    /// Smallest C with ratio(t) ≤ C·exp(C·t) at every sampled time.
    pub envelope_c: f64,
    /// Least-squares slope of log ratio against t.
    pub log_rate: f64,
    /// Ratios stay under C·exp(C·t) for the tested C (the fitted one unless
    /// an external constant was supplied).
    pub within_envelope: bool,
    pub tested_c: f64,
}

fn envelope_constant(times: &[f64], ratios: &[f64]) -> f64 {
    let mut c_max: f64 = 0.0;
    for (&t, &r) in times.iter().zip(ratios) {
        // Solve C·exp(C·t) = r for C by bisection; the left side is increasing.
        let (mut lo, mut hi) = (0.0, 1.0f64);
        while hi * (hi * t).exp() < r {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid * (mid * t).exp() < r {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        c_max = c_max.max(hi);
    }
    c_max
}

/// Ratios W₁(f_t, f̃_t)/W₁(f₀, f̃₀) along two flows (0/0 read as 1). When
/// `envelope` is given the ratios are tested against that constant with
/// relative slack `slack`, otherwise against the fitted one.
pub fn stability_experiment(
    f0: &DiscreteStatistic,
    g0: &DiscreteStatistic,
    grid: TimeGrid,
    spec_psi: &PotentialSpec,
    spec_u: &PotentialSpec,
    opts: &VlasovOptions,
    envelope: Option<f64>,
    slack: f64,
) -> Result<StabilityReport> {
    let a = dobrushin_solve(f0, grid, spec_psi, spec_u, opts)?;
    let b = dobrushin_solve(g0, grid, spec_psi, spec_u, opts)?;
    let d0 = wp(f0, g0, 1.0, Metric::Phase)?.0;
    let mut times = Vec::with_capacity(grid.steps + 1);
    let mut ratios = Vec::with_capacity(grid.steps + 1);
    for i in 0..=grid.steps {
        let dt = wp(&a.statistic(i), &b.statistic(i), 1.0, Metric::Phase)?.0;
        let r = if d0 == 0.0 {
            if dt == 0.0 {
                1.0
            } else {
                f64::INFINITY
            }
        } else {
            dt / d0
        };
        times.push(grid.time(i));
        ratios.push(r);
    }
    let envelope_c = envelope_constant(&times, &ratios);
    let logs: Vec<f64> = ratios.iter().map(|r| r.max(1e-300).ln()).collect();
    let n = times.len() as f64;
    let (mt, ml) = (times.iter().sum::<f64>() / n, logs.iter().sum::<f64>() / n);
    let cov: f64 = times
        .iter()
        .zip(&logs)
        .map(|(t, l)| (t - mt) * (l - ml))
        .sum();
    let var: f64 = times.iter().map(|t| (t - mt) * (t - mt)).sum();
    let log_rate = if var > 0.0 { cov / var } else { 0.0 };
    let tested_c = envelope.unwrap_or(envelope_c);
    let within_envelope = times
        .iter()
        .zip(&ratios)
        .all(|(&t, &r)| r <= tested_c * (tested_c * t).exp() * (1.0 + slack));
    Ok(StabilityReport {
        times,
        ratios,
        envelope_c,
        log_rate,
        within_envelope,
        tested_c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinetic() -> PotentialSpec {
        PotentialSpec::quadratic_kinetic()
    }

    #[test]
    fn newtonian_acceleration_is_force() {
        let f = DiscreteStatistic::from_atoms(&[
            (vec![0.0, 0.0], vec![1.0, 0.0], 0.25),
            (vec![1.0, 0.5], vec![0.0, -1.0], 0.5),
            (vec![-0.3, 0.2], vec![0.2, 0.2], 0.25),
        ])
        .unwrap();
        let u = PotentialSpec::gaussian_congestion();
        let a = acceleration(&f, &kinetic(), &u).unwrap();
        let m = Model::new(&kinetic(), &u, 2).unwrap();
        let xs: Vec<Vec<f64>> = f.points().iter().map(|p| p.x.clone()).collect();
        let vs: Vec<Vec<f64>> = f.points().iter().map(|p| p.v.clone()).collect();
        let (gx, _) = m.lagrangian_grads_at_atoms(&xs, &vs, f.weights());
        for k in 0..3 {
            for c in 0..2 {
                assert!((a.accelerations[k][c] - gx[k][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_atom_even_u_has_zero_acceleration() {
        let f = DiscreteStatistic::from_atoms(&[(vec![0.3], vec![1.0], 1.0)]).unwrap();
        let a = acceleration(&f, &kinetic(), &PotentialSpec::flocking(2.0, 1.0)).unwrap();
        assert!(a.accelerations[0][0].abs() < 1e-14);
    }

    #[test]
    fn free_transport_exact() {
        let f = DiscreteStatistic::from_atoms(&[
            (vec![0.0], vec![1.0], 0.5),
            (vec![2.0], vec![-0.5], 0.5),
        ])
        .unwrap();
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let flow = dobrushin_solve(
            &f,
            grid,
            &kinetic(),
            &PotentialSpec::zero(),
            &VlasovOptions::default(),
        )
        .unwrap();
        assert_eq!(flow.sub_horizons.len(), 1);
        assert_eq!(flow.sub_horizons[0].picard_iterations, 1);
        for i in 0..=100 {
            let t = grid.time(i);
            assert!((flow.x[i][0][0] - t).abs() < 1e-12);
            assert!((flow.x[i][1][0] - (2.0 - 0.5 * t)).abs() < 1e-12);
        }
    }

    #[test]
    fn stability_identical_inputs() {
        let f = DiscreteStatistic::from_atoms(&[
            (vec![0.0], vec![0.0], 0.5),
            (vec![1.0], vec![0.0], 0.5),
        ])
        .unwrap();
        let grid = TimeGrid::new(0.2, 20).unwrap();
        let r = stability_experiment(
            &f,
            &f,
            grid,
            &kinetic(),
            &PotentialSpec::quadratic_position(50.0),
            &VlasovOptions::default(),
            None,
            0.0,
        )
        .unwrap();
        assert!(r.ratios.iter().all(|&x| x == 1.0));
        assert!(r.within_envelope);
    }
}
