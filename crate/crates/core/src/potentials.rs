//! Catalog of kinetic terms ψ and pair interactions U with closed-form
//! derivatives, the mean-field Lagrangian L[f] = ψ + U∗f, and sampled
//! audits of the growth and convexity assumptions.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MfaError, Result};
use crate::model::{DiscreteStatistic, PhasePoint};
use crate::wasserstein::{wp, Metric};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PotentialKind {
    Zero,
    /// ψ = scale·½|v|²
    QuadraticKinetic,
    /// U = α|v|²
    VelocityQuadratic,
    /// U = κ|x|²
    QuadraticPosition,
    /// U = amplitude·exp(−|x|²)
    GaussianCongestion,
    /// U = κ(|v|² − c)·exp(−|x|²)
    Flocking,
    /// ψ = dist(v, {±e₁})
    TwoWell,
    /// U = α·dist(v, {0, ±4e₁})
    TwoWellInteraction,
    /// Φ(f) = ⟨f, φ + |v|²⟩ − |⟨f, v⟩|², φ = ¼(|v|² − 1)²
    VariancePenalty,
    /// Σ poly(x, v)·exp(−zᵀQz), z = (x, v)
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Monomial {
    pub coeff: f64,
    /// Exponents over z = (x₀..x_{d−1}, v₀..v_{d−1}).
    pub powers: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomTerm {
    pub monomials: Vec<Monomial>,
    /// Positive semidefinite 2d×2d matrix, row-major.
    pub q: Vec<Vec<f64>>,
}

/// Named potential with real parameters, as it appears in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialSpec {
    pub kind: PotentialKind,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub terms: Vec<CustomTerm>,
}

impl PotentialSpec {
    fn with(kind: PotentialKind, params: &[(&str, f64)]) -> Self {
        PotentialSpec {
            kind,
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            terms: Vec::new(),
        }
    }

    pub fn zero() -> Self {
        Self::with(PotentialKind::Zero, &[])
    }
    pub fn quadratic_kinetic() -> Self {
        Self::with(PotentialKind::QuadraticKinetic, &[])
    }
    pub fn kinetic_scaled(scale: f64) -> Self {
        Self::with(PotentialKind::QuadraticKinetic, &[("scale", scale)])
    }
    pub fn velocity_quadratic(alpha: f64) -> Self {
        Self::with(PotentialKind::VelocityQuadratic, &[("alpha", alpha)])
    }
    pub fn quadratic_position(kappa: f64) -> Self {
        Self::with(PotentialKind::QuadraticPosition, &[("kappa", kappa)])
    }
    pub fn gaussian_congestion() -> Self {
        Self::with(PotentialKind::GaussianCongestion, &[])
    }
    pub fn flocking(kappa: f64, c: f64) -> Self {
        Self::with(PotentialKind::Flocking, &[("kappa", kappa), ("c", c)])
    }
    pub fn two_well() -> Self {
        Self::with(PotentialKind::TwoWell, &[])
    }
    pub fn two_well_interaction(alpha: f64) -> Self {
        Self::with(PotentialKind::TwoWellInteraction, &[("alpha", alpha)])
    }
    pub fn variance_penalty() -> Self {
        Self::with(PotentialKind::VariancePenalty, &[])
    }
    pub fn custom(terms: Vec<CustomTerm>) -> Self {
        PotentialSpec {
            kind: PotentialKind::Custom,
            params: BTreeMap::new(),
            terms,
        }
    }

    pub fn compile(&self) -> Result<Potential> {
        Potential::from_spec(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledTerm {
    monomials: Vec<Monomial>,
    q: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Potential {
    Zero,
    KineticQuadratic {
        scale: f64,
    },
    VelocityQuadratic {
        alpha: f64,
    },
    PositionQuadratic {
        kappa: f64,
    },
    Gaussian {
        amplitude: f64,
    },
    Flocking {
        kappa: f64,
        c: f64,
    },
    TwoWell,
    TwoWellInteraction {
        alpha: f64,
    },
    /// The single-particle part φ(v) = ¼(|v|² − 1)² of the variance penalty.
    VarianceWell,
    Custom(Vec<CompiledTerm>),
}

fn take_params(spec: &PotentialSpec, allowed: &[(&str, Option<f64>)]) -> Result<Vec<f64>> {
    for key in spec.params.keys() {
        if !allowed.iter().any(|(k, _)| k == key) {
            return Err(MfaError::InvalidInput(format!(
                "unknown parameter `{key}` for potential kind {:?}",
                spec.kind
            )));
        }
    }
    allowed
        .iter()
        .map(|(k, default)| match (spec.params.get(*k), default) {
            (Some(v), _) if v.is_finite() => Ok(*v),
            (Some(v), _) => Err(MfaError::InvalidInput(format!(
                "parameter `{k}` = {v} is not finite"
            ))),
            (None, Some(d)) => Ok(*d),
            (None, None) => Err(MfaError::InvalidInput(format!(
                "missing parameter `{k}` for potential kind {:?}",
                spec.kind
            ))),
        })
        .collect()
}

impl Potential {
    pub fn from_spec(spec: &PotentialSpec) -> Result<Self> {
        use PotentialKind as K;
        if spec.kind != K::Custom && !spec.terms.is_empty() {
            return Err(MfaError::InvalidInput(
                "`terms` only applies to custom potentials".into(),
            ));
        }
        Ok(match spec.kind {
            K::Zero => {
                take_params(spec, &[])?;
                Potential::Zero
            }
            K::QuadraticKinetic => {
                let p = take_params(spec, &[("scale", Some(1.0))])?;
                Potential::KineticQuadratic { scale: p[0] }
            }
            K::VelocityQuadratic => {
                let p = take_params(spec, &[("alpha", None)])?;
                Potential::VelocityQuadratic { alpha: p[0] }
            }
            K::QuadraticPosition => {
                let p = take_params(spec, &[("kappa", None)])?;
                Potential::PositionQuadratic { kappa: p[0] }
            }
            K::GaussianCongestion => {
                let p = take_params(spec, &[("amplitude", Some(1.0))])?;
                Potential::Gaussian { amplitude: p[0] }
            }
            K::Flocking => {
                let p = take_params(spec, &[("kappa", None), ("c", None)])?;
                Potential::Flocking {
                    kappa: p[0],
                    c: p[1],
                }
            }
            K::TwoWell => {
                take_params(spec, &[])?;
                Potential::TwoWell
            }
            K::TwoWellInteraction => {
                let p = take_params(spec, &[("alpha", None)])?;
                Potential::TwoWellInteraction { alpha: p[0] }
            }
            K::VariancePenalty => {
                take_params(spec, &[])?;
                Potential::VarianceWell
            }
            K::Custom => {
                take_params(spec, &[])?;
                if spec.terms.is_empty() {
                    return Err(MfaError::InvalidInput(
                        "custom potential needs terms".into(),
                    ));
                }
                let mut terms = Vec::new();
                for t in &spec.terms {
                    let n = t.q.len();
                    if n == 0 || n % 2 != 0 || t.q.iter().any(|r| r.len() != n) {
                        return Err(MfaError::InvalidInput(
                            "custom q must be a square 2d×2d matrix".into(),
                        ));
                    }
                    let q = DMatrix::from_fn(n, n, |i, j| 0.5 * (t.q[i][j] + t.q[j][i]));
                    if q.iter().any(|c| !c.is_finite()) {
                        return Err(MfaError::InvalidInput(
                            "custom q has non-finite entries".into(),
                        ));
                    }
                    let min_eig = q.clone().symmetric_eigen().eigenvalues.min();
                    if min_eig < -1e-12 {
                        return Err(MfaError::InvalidInput(format!(
                            "custom q is not positive semidefinite (eigenvalue {min_eig})"
                        )));
                    }
                    for m in &t.monomials {
                        if m.powers.len() != n || !m.coeff.is_finite() {
                            return Err(MfaError::InvalidInput("malformed custom monomial".into()));
                        }
                    }
                    terms.push(CompiledTerm {
                        monomials: t.monomials.clone(),
                        q,
                    });
                }
                Potential::Custom(terms)
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Potential::Zero => "zero",
            Potential::KineticQuadratic { .. } => "quadratic_kinetic",
            Potential::VelocityQuadratic { .. } => "velocity_quadratic",
            Potential::PositionQuadratic { .. } => "quadratic_position",
            Potential::Gaussian { .. } => "gaussian_congestion",
            Potential::Flocking { .. } => "flocking",
            Potential::TwoWell => "two_well",
            Potential::TwoWellInteraction { .. } => "two_well_interaction",
            Potential::VarianceWell => "variance_penalty",
            Potential::Custom(_) => "custom",
        }
    }

    pub fn is_smooth(&self) -> bool {
        !matches!(
            self,
            Potential::TwoWell | Potential::TwoWellInteraction { .. }
        )
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Potential::Zero)
    }

    /// U(−x, −v) = U(x, v).
    pub fn is_even(&self) -> bool {
        match self {
            Potential::Custom(terms) => terms.iter().all(|t| {
                t.monomials
                    .iter()
                    .all(|m| m.powers.iter().sum::<u32>() % 2 == 0)
            }),
            _ => true,
        }
    }

    pub fn depends_on_v(&self) -> bool {
        !matches!(
            self,
            Potential::Zero | Potential::PositionQuadratic { .. } | Potential::Gaussian { .. }
        )
    }

    /// Dimension requirement of custom terms, if any.
    pub fn check_dim(&self, d: usize) -> Result<()> {
        if let Potential::Custom(terms) = self {
            for t in terms {
                if t.q.nrows() != 2 * d {
                    return Err(MfaError::DimensionMismatch {
                        expected: 2 * d,
                        got: t.q.nrows(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn value(&self, x: &[f64], v: &[f64]) -> f64 {
        match self {
            Potential::Zero => 0.0,
            Potential::KineticQuadratic { scale } => 0.5 * scale * sq(v),
            Potential::VelocityQuadratic { alpha } => alpha * sq(v),
            Potential::PositionQuadratic { kappa } => kappa * sq(x),
            Potential::Gaussian { amplitude } => amplitude * (-sq(x)).exp(),
            Potential::Flocking { kappa, c } => kappa * (sq(v) - c) * (-sq(x)).exp(),
            Potential::TwoWell => {
                let (w, _) = nearest_well(v, &[-1.0, 1.0]);
                dist_to(v, w)
            }
            Potential::TwoWellInteraction { alpha } => {
                let (w, _) = nearest_well(v, &[-4.0, 0.0, 4.0]);
                alpha * dist_to(v, w)
            }
            Potential::VarianceWell => {
                let s = sq(v) - 1.0;
                0.25 * s * s
            }
            Potential::Custom(terms) => {
                let z = join(x, v);
                terms.iter().map(|t| t.value(&z)).sum()
            }
        }
    }

    /// Adds `scale·(∇_x, ∇_v)` into `gx`, `gv`. At the kinks of the piecewise
    /// linear kinds the right-limit gradient is used.
    pub fn add_grad(&self, x: &[f64], v: &[f64], scale: f64, gx: &mut [f64], gv: &mut [f64]) {
        let d = x.len();
        match self {
            Potential::Zero => {}
            Potential::KineticQuadratic { scale: s } => {
                for c in 0..d {
                    gv[c] += scale * s * v[c];
                }
            }
            Potential::VelocityQuadratic { alpha } => {
                for c in 0..d {
                    gv[c] += scale * 2.0 * alpha * v[c];
                }
            }
            Potential::PositionQuadratic { kappa } => {
                for c in 0..d {
                    gx[c] += scale * 2.0 * kappa * x[c];
                }
            }
            Potential::Gaussian { amplitude } => {
                let e = amplitude * (-sq(x)).exp();
                for c in 0..d {
                    gx[c] -= scale * 2.0 * e * x[c];
                }
            }
            Potential::Flocking { kappa, c: cc } => {
                let e = (-sq(x)).exp();
                let g = sq(v) - cc;
                for c in 0..d {
                    gx[c] -= scale * 2.0 * kappa * g * e * x[c];
                    gv[c] += scale * 2.0 * kappa * e * v[c];
                }
            }
            Potential::TwoWell => well_grad(v, &[-1.0, 1.0], scale, gv),
            Potential::TwoWellInteraction { alpha } => {
                well_grad(v, &[-4.0, 0.0, 4.0], scale * alpha, gv)
            }
            Potential::VarianceWell => {
                let s = sq(v) - 1.0;
                for c in 0..d {
                    gv[c] += scale * s * v[c];
                }
            }
            Potential::Custom(terms) => {
                let z = join(x, v);
                let mut g = vec![0.0; 2 * d];
                for t in terms {
                    t.add_grad(&z, &mut g);
                }
                for c in 0..d {
                    gx[c] += scale * g[c];
                    gv[c] += scale * g[d + c];
                }
            }
        }
    }

    pub fn grad(&self, x: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut gx = vec![0.0; x.len()];
        let mut gv = vec![0.0; v.len()];
        self.add_grad(x, v, 1.0, &mut gx, &mut gv);
        (gx, gv)
    }

    /// Full 2d×2d Hessian in the variable order (x, v); the top-right block is
    /// ∂²/∂x_a∂v_b.
    pub fn hess(&self, x: &[f64], v: &[f64]) -> DMatrix<f64> {
        let d = x.len();
        let mut h = DMatrix::zeros(2 * d, 2 * d);
        match self {
            Potential::Zero => {}
            Potential::KineticQuadratic { scale } => {
                for c in 0..d {
                    h[(d + c, d + c)] = *scale;
                }
            }
            Potential::VelocityQuadratic { alpha } => {
                for c in 0..d {
                    h[(d + c, d + c)] = 2.0 * alpha;
                }
            }
            Potential::PositionQuadratic { kappa } => {
                for c in 0..d {
                    h[(c, c)] = 2.0 * kappa;
                }
            }
            Potential::Gaussian { amplitude } => {
                let e = amplitude * (-sq(x)).exp();
                gaussian_xx(&mut h, x, e);
            }
            Potential::Flocking { kappa, c: cc } => {
                let e = (-sq(x)).exp();
                let g = sq(v) - cc;
                gaussian_xx(&mut h, x, kappa * g * e);
                for a in 0..d {
                    for b in 0..d {
                        let xv = -4.0 * kappa * e * x[a] * v[b];
                        h[(a, d + b)] = xv;
                        h[(d + b, a)] = xv;
                    }
                    h[(d + a, d + a)] = 2.0 * kappa * e;
                }
            }
            Potential::TwoWell => well_hess(&mut h, v, &[-1.0, 1.0], 1.0),
            Potential::TwoWellInteraction { alpha } => {
                well_hess(&mut h, v, &[-4.0, 0.0, 4.0], *alpha)
            }
            Potential::VarianceWell => {
                let s = sq(v) - 1.0;
                for a in 0..d {
                    for b in 0..d {
                        h[(d + a, d + b)] = 2.0 * v[a] * v[b] + if a == b { s } else { 0.0 };
                    }
                }
            }
            Potential::Custom(terms) => {
                let z = join(x, v);
                for t in terms {
                    t.add_hess(&z, &mut h);
                }
            }
        }
        h
    }
}

fn gaussian_xx(h: &mut DMatrix<f64>, x: &[f64], e: f64) {
    let d = x.len();
    for a in 0..d {
        for b in 0..d {
            h[(a, b)] += e * (4.0 * x[a] * x[b] - if a == b { 2.0 } else { 0.0 });
        }
    }
}

fn sq(a: &[f64]) -> f64 {
    a.iter().map(|c| c * c).sum()
}

fn join(x: &[f64], v: &[f64]) -> Vec<f64> {
    let mut z = Vec::with_capacity(x.len() + v.len());
    z.extend_from_slice(x);
    z.extend_from_slice(v);
    z
}

/// Nearest of the wells `c·e₁`; ties go to the larger first coordinate.
fn nearest_well(v: &[f64], wells: &[f64]) -> (f64, usize) {
    let mut best = (wells[0], 0);
    let mut best_d = f64::INFINITY;
    for (i, &w) in wells.iter().enumerate() {
        let dd = (v[0] - w).abs();
        if dd <= best_d {
            best_d = dd;
            best = (w, i);
        }
    }
    best
}

fn dist_to(v: &[f64], w: f64) -> f64 {
    let mut s = (v[0] - w) * (v[0] - w);
    for c in &v[1..] {
        s += c * c;
    }
    s.sqrt()
}

fn well_grad(v: &[f64], wells: &[f64], scale: f64, gv: &mut [f64]) {
    let (w, _) = nearest_well(v, wells);
    let r = dist_to(v, w);
    if r == 0.0 {
        gv[0] += scale;
        return;
    }
    gv[0] += scale * (v[0] - w) / r;
    for c in 1..v.len() {
        gv[c] += scale * v[c] / r;
    }
}

fn well_hess(h: &mut DMatrix<f64>, v: &[f64], wells: &[f64], scale: f64) {
    let d = v.len();
    if d == 1 {
        return;
    }
    let (w, _) = nearest_well(v, wells);
    let r = dist_to(v, w);
    if r == 0.0 {
        return;
    }
    let mut n: Vec<f64> = v.to_vec();
    n[0] -= w;
    for c in n.iter_mut() {
        *c /= r;
    }
    for a in 0..d {
        for b in 0..d {
            let id = if a == b { 1.0 } else { 0.0 };
            h[(d + a, d + b)] += scale * (id - n[a] * n[b]) / r;
        }
    }
}

fn pw(z: f64, p: u32) -> f64 {
    if p == 0 {
        1.0
    } else {
        z.powi(p as i32)
    }
}

impl Monomial {
    fn value(&self, z: &[f64]) -> f64 {
        self.coeff
            * z.iter()
                .zip(&self.powers)
                .map(|(zi, &p)| pw(*zi, p))
                .product::<f64>()
    }

    fn partial(&self, z: &[f64], i: usize) -> f64 {
        let pi = self.powers[i];
        if pi == 0 {
            return 0.0;
        }
        let mut out = self.coeff * pi as f64 * pw(z[i], pi - 1);
        for (j, (zj, &pj)) in z.iter().zip(&self.powers).enumerate() {
            if j != i {
                out *= pw(*zj, pj);
            }
        }
        out
    }

    fn second(&self, z: &[f64], i: usize, j: usize) -> f64 {
        let (pi, pj) = (self.powers[i], self.powers[j]);
        let mut out = self.coeff;
        if i == j {
            if pi < 2 {
                return 0.0;
            }
            out *= (pi * (pi - 1)) as f64 * pw(z[i], pi - 2);
        } else {
            if pi == 0 || pj == 0 {
                return 0.0;
            }
            out *= (pi * pj) as f64 * pw(z[i], pi - 1) * pw(z[j], pj - 1);
        }
        for (l, (zl, &pl)) in z.iter().zip(&self.powers).enumerate() {
            if l != i && l != j {
                out *= pw(*zl, pl);
            }
        }
        out
    }
}

impl CompiledTerm {
    fn qz(&self, z: &[f64]) -> Vec<f64> {
        let n = z.len();
        (0..n)
            .map(|i| (0..n).map(|j| self.q[(i, j)] * z[j]).sum())
            .collect()
    }

    fn poly(&self, z: &[f64]) -> f64 {
        self.monomials.iter().map(|m| m.value(z)).sum()
    }

    fn value(&self, z: &[f64]) -> f64 {
        let qz = self.qz(z);
        let quad: f64 = z.iter().zip(&qz).map(|(a, b)| a * b).sum();
        self.poly(z) * (-quad).exp()
    }

    fn add_grad(&self, z: &[f64], g: &mut [f64]) {
        let n = z.len();
        let qz = self.qz(z);
        let e = (-z.iter().zip(&qz).map(|(a, b)| a * b).sum::<f64>()).exp();
        let p = self.poly(z);
        for i in 0..n {
            let dp: f64 = self.monomials.iter().map(|m| m.partial(z, i)).sum();
            g[i] += e * (dp - 2.0 * p * qz[i]);
        }
    }

    fn add_hess(&self, z: &[f64], h: &mut DMatrix<f64>) {
        let n = z.len();
        let qz = self.qz(z);
        let e = (-z.iter().zip(&qz).map(|(a, b)| a * b).sum::<f64>()).exp();
        let p = self.poly(z);
        let dp: Vec<f64> = (0..n)
            .map(|i| self.monomials.iter().map(|m| m.partial(z, i)).sum())
            .collect();
        for i in 0..n {
            for j in 0..n {
                let d2: f64 = self.monomials.iter().map(|m| m.second(z, i, j)).sum();
                h[(i, j)] += e
                    * (d2 - 2.0 * dp[i] * qz[j] - 2.0 * qz[i] * dp[j] + 4.0 * p * qz[i] * qz[j]
                        - 2.0 * p * self.q[(i, j)]);
            }
        }
    }
}

/// A compiled (ψ, U) pair. A variance-penalty ψ carries its implicit
/// |v|² interaction so that Φ = ⟨f, ψ⟩ + ½⟨f, U∗f⟩ holds for every kind.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub psi: Potential,
    pub interaction: Potential,
    variance_penalty: bool,
    dim: usize,
}

const VP_PAIR: Potential = Potential::VelocityQuadratic { alpha: 1.0 };

impl Model {
    pub fn new(psi: &PotentialSpec, u: &PotentialSpec, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(MfaError::InvalidInput(
                "dimension must be at least 1".into(),
            ));
        }
        if u.kind == PotentialKind::VariancePenalty {
            return Err(MfaError::InvalidInput(
                "variance_penalty can only be used as ψ".into(),
            ));
        }
        let psi_p = psi.compile()?;
        let u_p = u.compile()?;
        psi_p.check_dim(dim)?;
        u_p.check_dim(dim)?;
        if !u_p.is_even() {
            return Err(MfaError::InvalidInput(
                "interaction must satisfy U(−x,−v) = U(x,v)".into(),
            ));
        }
        Ok(Model {
            variance_penalty: psi.kind == PotentialKind::VariancePenalty,
            psi: psi_p,
            interaction: u_p,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_variance_penalty(&self) -> bool {
        self.variance_penalty
    }

    pub fn is_smooth(&self) -> bool {
        self.psi.is_smooth() && self.interaction.is_smooth()
    }

    pub fn require_smooth(&self) -> Result<()> {
        for p in [&self.psi, &self.interaction] {
            if !p.is_smooth() {
                return Err(MfaError::NonSmooth(p.name().into()));
            }
        }
        Ok(())
    }

    /// No interaction at all (Φ linear in f).
    pub fn is_noninteracting(&self) -> bool {
        self.interaction.is_zero() && !self.variance_penalty
    }

    pub fn interaction_depends_on_v(&self) -> bool {
        self.variance_penalty || self.interaction.depends_on_v()
    }

    pub fn psi_value(&self, x: &[f64], v: &[f64]) -> f64 {
        self.psi.value(x, v)
    }

    pub fn u_value(&self, dx: &[f64], dv: &[f64]) -> f64 {
        let mut s = self.interaction.value(dx, dv);
        if self.variance_penalty {
            s += VP_PAIR.value(dx, dv);
        }
        s
    }

    pub fn add_psi_grad(&self, x: &[f64], v: &[f64], scale: f64, gx: &mut [f64], gv: &mut [f64]) {
        self.psi.add_grad(x, v, scale, gx, gv);
    }

    pub fn add_u_grad(&self, dx: &[f64], dv: &[f64], scale: f64, gx: &mut [f64], gv: &mut [f64]) {
        self.interaction.add_grad(dx, dv, scale, gx, gv);
        if self.variance_penalty {
            VP_PAIR.add_grad(dx, dv, scale, gx, gv);
        }
    }

    pub fn psi_hess(&self, x: &[f64], v: &[f64]) -> DMatrix<f64> {
        self.psi.hess(x, v)
    }

    pub fn u_hess(&self, dx: &[f64], dv: &[f64]) -> DMatrix<f64> {
        let mut h = self.interaction.hess(dx, dv);
        if self.variance_penalty {
            h += VP_PAIR.hess(dx, dv);
        }
        h
    }

    /// Φ(f) split as (⟨f, ψ⟩, interaction part). The variance penalty is
    /// evaluated through its own formula.
    pub fn phi_split(&self, f: &DiscreteStatistic) -> (f64, f64) {
        let pts = f.points();
        self.phi_parts(pts.len(), |k| (&pts[k].x, &pts[k].v), f.weights())
    }

    /// Same as [`Model::phi_split`] for atoms given by an accessor.
    pub fn phi_parts<'a>(
        &self,
        n: usize,
        at: impl Fn(usize) -> (&'a [f64], &'a [f64]),
        w: &[f64],
    ) -> (f64, f64) {
        let d = self.dim;
        let mut kinetic = 0.0;
        for k in 0..n {
            let (x, v) = at(k);
            kinetic += w[k] * self.psi.value(x, v);
        }
        let mut inter = 0.0;
        if !self.interaction.is_zero() {
            let zero = vec![0.0; d];
            let u0 = self.interaction.value(&zero, &zero);
            let mut dx = vec![0.0; d];
            let mut dv = vec![0.0; d];
            for j in 0..n {
                inter += 0.5 * w[j] * w[j] * u0;
                let (xj, vj) = at(j);
                for k in (j + 1)..n {
                    let (xk, vk) = at(k);
                    for c in 0..d {
                        dx[c] = xj[c] - xk[c];
                        dv[c] = vj[c] - vk[c];
                    }
                    inter += w[j] * w[k] * self.interaction.value(&dx, &dv);
                }
            }
        }
        if self.variance_penalty {
            let mut m2 = 0.0;
            let mut mean = vec![0.0; d];
            for k in 0..n {
                let (_, v) = at(k);
                m2 += w[k] * sq(v);
                for c in 0..d {
                    mean[c] += w[k] * v[c];
                }
            }
            inter += m2 - sq(&mean);
        }
        (kinetic, inter)
    }

    pub fn phi(&self, f: &DiscreteStatistic) -> f64 {
        let (a, b) = self.phi_split(f);
        a + b
    }

    /// ∇_x L[f] and ∇_v L[f] at every atom of `f` itself.
    pub fn lagrangian_grads_at_atoms(
        &self,
        xs: &[Vec<f64>],
        vs: &[Vec<f64>],
        w: &[f64],
    ) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let n = xs.len();
        let d = self.dim;
        let mut gx = vec![vec![0.0; d]; n];
        let mut gv = vec![vec![0.0; d]; n];
        for k in 0..n {
            self.psi
                .add_grad(&xs[k], &vs[k], 1.0, &mut gx[k], &mut gv[k]);
        }
        if !self.interaction.is_zero() || self.variance_penalty {
            let mut dx = vec![0.0; d];
            let mut dv = vec![0.0; d];
            let mut tx = vec![0.0; d];
            let mut tv = vec![0.0; d];
            for k in 0..n {
                for j in (k + 1)..n {
                    for c in 0..d {
                        dx[c] = xs[k][c] - xs[j][c];
                        dv[c] = vs[k][c] - vs[j][c];
                        tx[c] = 0.0;
                        tv[c] = 0.0;
                    }
                    self.add_u_grad(&dx, &dv, 1.0, &mut tx, &mut tv);
                    // ∇U is odd, so the (j, k) term is the negative of the (k, j) term.
                    for c in 0..d {
                        gx[k][c] += w[j] * tx[c];
                        gv[k][c] += w[j] * tv[c];
                        gx[j][c] -= w[k] * tx[c];
                        gv[j][c] -= w[k] * tv[c];
                    }
                }
            }
        }
        (gx, gv)
    }
}

/// L[f](x, v) = ψ(x, v) + Σ_k w_k U(x − x_k, v − v_k).
#[derive(Debug, Clone)]
pub struct MeanFieldLagrangian {
    model: Model,
    f: DiscreteStatistic,
}

pub fn mean_field_lagrangian(
    spec_psi: &PotentialSpec,
    spec_u: &PotentialSpec,
    f: &DiscreteStatistic,
) -> Result<MeanFieldLagrangian> {
    let model = Model::new(spec_psi, spec_u, f.dim())?;
    Ok(MeanFieldLagrangian {
        model,
        f: f.clone(),
    })
}

impl MeanFieldLagrangian {
    pub fn from_model(model: Model, f: DiscreteStatistic) -> Result<Self> {
        if model.dim() != f.dim() {
            return Err(MfaError::DimensionMismatch {
                expected: model.dim(),
                got: f.dim(),
            });
        }
        Ok(MeanFieldLagrangian { model, f })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn statistic(&self) -> &DiscreteStatistic {
        &self.f
    }

    pub fn eval(&self, x: &[f64], v: &[f64]) -> f64 {
        let d = x.len();
        let mut dx = vec![0.0; d];
        let mut dv = vec![0.0; d];
        let mut s = self.model.psi_value(x, v);
        for (p, w) in self.f.points().iter().zip(self.f.weights()) {
            for c in 0..d {
                dx[c] = x[c] - p.x[c];
                dv[c] = v[c] - p.v[c];
            }
            s += w * self.model.u_value(&dx, &dv);
        }
        s
    }

    pub fn grad(&self, x: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = x.len();
        let mut gx = vec![0.0; d];
        let mut gv = vec![0.0; d];
        self.add_grad(x, v, &mut gx, &mut gv);
        (gx, gv)
    }

    pub fn add_grad(&self, x: &[f64], v: &[f64], gx: &mut [f64], gv: &mut [f64]) {
        let d = x.len();
        let mut dx = vec![0.0; d];
        let mut dv = vec![0.0; d];
        self.model.add_psi_grad(x, v, 1.0, gx, gv);
        for (p, w) in self.f.points().iter().zip(self.f.weights()) {
            for c in 0..d {
                dx[c] = x[c] - p.x[c];
                dv[c] = v[c] - p.v[c];
            }
            self.model.add_u_grad(&dx, &dv, *w, gx, gv);
        }
    }

    pub fn hess(&self, x: &[f64], v: &[f64]) -> DMatrix<f64> {
        let d = x.len();
        let mut h = self.model.psi_hess(x, v);
        let mut dx = vec![0.0; d];
        let mut dv = vec![0.0; d];
        for (p, w) in self.f.points().iter().zip(self.f.weights()) {
            for c in 0..d {
                dx[c] = x[c] - p.x[c];
                dv[c] = v[c] - p.v[c];
            }
            h += self.model.u_hess(&dx, &dv) * *w;
        }
        h
    }
}

/// ψ₂(x, v, x′, v′) = ½ψ(x, v) + ½ψ(x′, v′) + ½U(x − x′, v − v′).
pub fn pairwise_psi2(
    spec_psi: &PotentialSpec,
    spec_u: &PotentialSpec,
    x: &[f64],
    v: &[f64],
    xp: &[f64],
    vp: &[f64],
) -> Result<f64> {
    if x.len() != xp.len() || v.len() != vp.len() || x.len() != v.len() {
        return Err(MfaError::DimensionMismatch {
            expected: x.len(),
            got: xp.len(),
        });
    }
    let model = Model::new(spec_psi, spec_u, x.len())?;
    Ok(model_psi2(&model, x, v, xp, vp))
}

pub(crate) fn model_psi2(model: &Model, x: &[f64], v: &[f64], xp: &[f64], vp: &[f64]) -> f64 {
    let dx: Vec<f64> = x.iter().zip(xp).map(|(a, b)| a - b).collect();
    let dv: Vec<f64> = v.iter().zip(vp).map(|(a, b)| a - b).collect();
    0.5 * model.psi_value(x, v) + 0.5 * model.psi_value(xp, vp) + 0.5 * model.u_value(&dx, &dv)
}

/// Sampling box for [`audit_growth`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditBox {
    pub dim: usize,
    pub x_radius: f64,
    pub v_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditWitness {
    pub reason: String,
    pub points: Vec<PhasePoint>,
    pub weights: Vec<f64>,
    pub phi: f64,
    pub second_moment: f64,
}

/// Sampled check of ⟨f, −C + c|v|²⟩ ≤ Φ(f) ≤ ⟨f, C + C|v|²⟩, a fitted
/// continuity constant, and midpoint convexity of ψ₂ in (v, v′).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthAudit {
    pub samples: usize,
    /// Lower growth rate c.
    pub c: f64,
    /// Constant C covering the lower offset and the upper bound.
    pub big_c: f64,
    /// Fitted constant in |Φ(f) − Φ(f′)| ≤ K⟨f + f′, 1 + |v|²⟩^{1/2} W₂(f, f′).
    pub continuity_constant: f64,
    pub pass: bool,
    pub psi2_convex: bool,
    pub witness: Option<AuditWitness>,
    pub convexity_witness: Option<AuditWitness>,
}

const MIN_GROWTH: f64 = 1e-6;

fn scaled(f: &DiscreteStatistic, s: f64) -> DiscreteStatistic {
    let pts = f
        .points()
        .iter()
        .map(|p| PhasePoint {
            x: p.x.clone(),
            v: p.v.iter().map(|c| c * s).collect(),
        })
        .collect();
    DiscreteStatistic::new(pts, f.weights().to_vec()).expect("scaling keeps statistic valid")
}

fn random_vec(rng: &mut ChaCha8Rng, d: usize, r: f64) -> Vec<f64> {
    (0..d).map(|_| rng.gen_range(-r..=r)).collect()
}

fn sample_statistic(rng: &mut ChaCha8Rng, b: &AuditBox, kind: usize) -> DiscreteStatistic {
    let d = b.dim;
    match kind % 3 {
        0 => DiscreteStatistic::from_atoms(&[(
            random_vec(rng, d, b.x_radius),
            random_vec(rng, d, b.v_radius),
            1.0,
        )]),
        1 => {
            let w: f64 = rng.gen_range(0.05..0.95);
            DiscreteStatistic::from_atoms(&[
                (
                    random_vec(rng, d, b.x_radius),
                    random_vec(rng, d, b.v_radius),
                    w,
                ),
                (
                    random_vec(rng, d, b.x_radius),
                    random_vec(rng, d, b.v_radius),
                    1.0 - w,
                ),
            ])
        }
        _ => {
            let v = random_vec(rng, d, b.v_radius);
            let vm: Vec<f64> = v.iter().map(|c| -c).collect();
            DiscreteStatistic::from_atoms(&[
                (random_vec(rng, d, b.x_radius), v, 0.5),
                (random_vec(rng, d, b.x_radius), vm, 0.5),
            ])
        }
    }
    .expect("sampled statistic is valid")
}

pub fn audit_growth(
    spec_psi: &PotentialSpec,
    spec_u: &PotentialSpec,
    bx: &AuditBox,
    samples: usize,
    seed: u64,
) -> Result<GrowthAudit> {
    if samples == 0 || !(bx.x_radius >= 0.0) || !(bx.v_radius > 0.0) || bx.dim == 0 {
        return Err(MfaError::InvalidInput("audit box must be nonempty".into()));
    }
    let model = Model::new(spec_psi, spec_u, bx.dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Growth: compare Φ along the ray v ↦ s·v at s = ½ and s = 1.
    let mut records = Vec::with_capacity(2 * samples);
    let mut min_slope = f64::INFINITY;
    let mut slope_witness = None;
    for i in 0..samples {
        let f = sample_statistic(&mut rng, bx, i);
        let lo = scaled(&f, 0.5);
        let (phi_lo, m_lo) = (model.phi(&lo), crate::model::moment(&lo, 2.0));
        let (phi_hi, m_hi) = (model.phi(&f), crate::model::moment(&f, 2.0));
        if !phi_lo.is_finite() || !phi_hi.is_finite() {
            return Err(MfaError::NonFinite("Φ at audit sample".into()));
        }
        records.push((phi_lo, m_lo));
        records.push((phi_hi, m_hi));
        if m_hi - m_lo > 1e-9 {
            let slope = (phi_hi - phi_lo) / (m_hi - m_lo);
            if slope < min_slope {
                min_slope = slope;
                slope_witness = Some(AuditWitness {
                    reason: "smallest growth slope along v ↦ s·v".into(),
                    points: f.points().to_vec(),
                    weights: f.weights().to_vec(),
                    phi: phi_hi,
                    second_moment: m_hi,
                });
            }
        }
    }
    let c = if min_slope.is_finite() {
        0.5 * min_slope
    } else {
        0.0
    };
    let mut big_c: f64 = 0.0;
    for &(phi, m2) in &records {
        if c > 0.0 {
            big_c = big_c.max(c * m2 - phi);
        }
        big_c = big_c.max(phi / (1.0 + m2));
    }
    let pass = c >= MIN_GROWTH;

    // Continuity on nearby pairs.
    let mut cont: f64 = 0.0;
    let eps = 1e-2 * bx.v_radius.max(bx.x_radius).max(1e-3);
    for i in 0..samples.min(200) {
        let f = sample_statistic(&mut rng, bx, i + 1);
        let pts = f
            .points()
            .iter()
            .map(|p| PhasePoint {
                x: p.x.iter().map(|c| c + rng.gen_range(-eps..=eps)).collect(),
                v: p.v.iter().map(|c| c + rng.gen_range(-eps..=eps)).collect(),
            })
            .collect();
        let g = DiscreteStatistic::new(pts, f.weights().to_vec())?;
        let (w2, _) = wp(&f, &g, 2.0, Metric::Phase)?;
        if w2 > 1e-12 {
            let mass = 2.0 + crate::model::moment(&f, 2.0) + crate::model::moment(&g, 2.0);
            cont = cont.max((model.phi(&f) - model.phi(&g)).abs() / (mass.sqrt() * w2));
        }
    }

    // Midpoint convexity of ψ₂ in (v, v′).
    let mut psi2_convex = true;
    let mut convexity_witness = None;
    let d = bx.dim;
    for _ in 0..samples {
        let x = random_vec(&mut rng, d, bx.x_radius);
        let xp = random_vec(&mut rng, d, bx.x_radius);
        let (va, vpa) = (
            random_vec(&mut rng, d, bx.v_radius),
            random_vec(&mut rng, d, bx.v_radius),
        );
        let (vb, vpb) = (
            random_vec(&mut rng, d, bx.v_radius),
            random_vec(&mut rng, d, bx.v_radius),
        );
        let vm: Vec<f64> = va.iter().zip(&vb).map(|(a, b)| 0.5 * (a + b)).collect();
        let vpm: Vec<f64> = vpa.iter().zip(&vpb).map(|(a, b)| 0.5 * (a + b)).collect();
        let a = model_psi2(&model, &x, &va, &xp, &vpa);
        let b = model_psi2(&model, &x, &vb, &xp, &vpb);
        let m = model_psi2(&model, &x, &vm, &xp, &vpm);
        if m > 0.5 * (a + b) + 1e-9 * (1.0 + a.abs() + b.abs()) {
            psi2_convex = false;
            convexity_witness = Some(AuditWitness {
                reason: "midpoint convexity of ψ₂ in (v, v′) fails".into(),
                points: vec![
                    PhasePoint {
                        x: x.clone(),
                        v: vm,
                    },
                    PhasePoint {
                        x: xp.clone(),
                        v: vpm,
                    },
                ],
                weights: vec![0.5, 0.5],
                phi: m,
                second_moment: 0.5 * (a + b),
            });
            break;
        }
    }

    Ok(GrowthAudit {
        samples,
        c,
        big_c,
        continuity_constant: cont,
        pass,
        psi2_convex,
        witness: if pass { None } else { slope_witness },
        convexity_witness,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_kinetic_values() {
        let p = PotentialSpec::quadratic_kinetic().compile().unwrap();
        assert_eq!(p.value(&[0.0], &[2.0]), 2.0);
        assert_eq!(p.grad(&[0.0], &[2.0]).1, vec![2.0]);
        let h = p.hess(&[0.0], &[2.0]);
        assert_eq!(h[(1, 1)], 1.0);
    }

    #[test]
    fn quadratic_position_values() {
        let p = PotentialSpec::quadratic_position(50.0).compile().unwrap();
        assert_eq!(p.value(&[1.0, 0.0], &[0.0, 0.0]), 50.0);
        assert_eq!(p.grad(&[1.0, 0.0], &[0.0, 0.0]).0, vec![100.0, 0.0]);
    }

    #[test]
    fn two_well_values_and_right_limits() {
        let p = PotentialSpec::two_well().compile().unwrap();
        assert_eq!(p.value(&[0.0], &[0.5]), 0.5);
        assert_eq!(p.value(&[0.0], &[-2.0]), 1.0);
        assert_eq!(p.grad(&[0.0], &[1.0]).1, vec![1.0]);
        assert_eq!(p.grad(&[0.0], &[-1.0]).1, vec![1.0]);
        assert_eq!(p.grad(&[0.0], &[0.0]).1, vec![-1.0]);
        let u = PotentialSpec::two_well_interaction(2.0).compile().unwrap();
        assert_eq!(u.value(&[0.0], &[2.0]), 4.0);
        assert_eq!(u.value(&[0.0], &[4.0]), 0.0);
        assert_eq!(u.value(&[0.0], &[-3.0]), 2.0);
    }

    #[test]
    fn lagrangian_examples() {
        let f = DiscreteStatistic::from_atoms(&[(vec![0.0], vec![0.0], 1.0)]).unwrap();
        let l = mean_field_lagrangian(
            &PotentialSpec::quadratic_kinetic(),
            &PotentialSpec::quadratic_position(50.0),
            &f,
        )
        .unwrap();
        assert!((l.eval(&[0.3], &[1.2]) - (0.5 * 1.44 + 50.0 * 0.09)).abs() < 1e-12);

        let f = DiscreteStatistic::from_atoms(&[
            (vec![0.0], vec![0.0], 0.5),
            (vec![1.0], vec![0.0], 0.5),
        ])
        .unwrap();
        let l = mean_field_lagrangian(
            &PotentialSpec::quadratic_kinetic(),
            &PotentialSpec::quadratic_position(50.0),
            &f,
        )
        .unwrap();
        let (x, v) = (0.3, -0.4);
        let want = 0.5 * v * v + 25.0 * x * x + 25.0 * (x - 1.0) * (x - 1.0);
        assert!((l.eval(&[x], &[v]) - want).abs() < 1e-12);

        let l =
            mean_field_lagrangian(&PotentialSpec::two_well(), &PotentialSpec::zero(), &f).unwrap();
        assert_eq!(l.eval(&[0.2], &[0.5]), 0.5);
    }

    #[test]
    fn psi2_examples() {
        let k = PotentialSpec::quadratic_kinetic();
        assert_eq!(
            pairwise_psi2(&k, &PotentialSpec::zero(), &[0.0], &[1.0], &[0.0], &[1.0]).unwrap(),
            0.5
        );
        let u = PotentialSpec::quadratic_position(50.0);
        assert_eq!(
            pairwise_psi2(&k, &u, &[1.0], &[0.0], &[0.0], &[0.0]).unwrap(),
            25.0
        );
        let a = pairwise_psi2(&k, &u, &[0.3], &[1.0], &[-0.2], &[0.4]).unwrap();
        let b = pairwise_psi2(&k, &u, &[-0.2], &[0.4], &[0.3], &[1.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_parameter_rejected() {
        let mut s = PotentialSpec::quadratic_position(1.0);
        s.params.insert("beta".into(), 1.0);
        assert!(s.compile().is_err());
        let s = PotentialSpec {
            kind: PotentialKind::Flocking,
            params: BTreeMap::new(),
            terms: vec![],
        };
        assert!(s.compile().is_err());
    }

    #[test]
    fn audit_examples() {
        let bx = AuditBox {
            dim: 1,
            x_radius: 2.0,
            v_radius: 4.0,
        };
        let a = audit_growth(
            &PotentialSpec::quadratic_kinetic(),
            &PotentialSpec::gaussian_congestion(),
            &bx,
            300,
            1,
        )
        .unwrap();
        assert!(a.pass && a.psi2_convex, "{a:?}");

        let psi = PotentialSpec::kinetic_scaled(2.0);
        let a = audit_growth(&psi, &PotentialSpec::velocity_quadratic(-1.0), &bx, 300, 1).unwrap();
        assert!(!a.pass);
        assert!(a.witness.is_some());

        let a = audit_growth(&psi, &PotentialSpec::velocity_quadratic(-0.5), &bx, 300, 1).unwrap();
        assert!(a.pass && a.psi2_convex, "{a:?}");
    }

    #[test]
    fn custom_gaussian_matches_catalog() {
        let term = CustomTerm {
            monomials: vec![Monomial {
                coeff: 1.0,
                powers: vec![0, 0],
            }],
            q: vec![vec![1.0, 0.0], vec![0.0, 0.0]],
        };
        let c = PotentialSpec::custom(vec![term]).compile().unwrap();
        let g = PotentialSpec::gaussian_congestion().compile().unwrap();
        for &(x, v) in &[(0.3, 1.0), (-1.2, 0.0), (2.0, -3.0)] {
            assert!((c.value(&[x], &[v]) - g.value(&[x], &[v])).abs() < 1e-15);
            let (a, b) = (c.grad(&[x], &[v]), g.grad(&[x], &[v]));
            assert!((a.0[0] - b.0[0]).abs() < 1e-14);
            assert!((c.hess(&[x], &[v]) - g.hess(&[x], &[v])).abs().max() < 1e-13);
        }
    }

    #[test]
    fn non_psd_custom_rejected() {
        let term = CustomTerm {
            monomials: vec![Monomial {
                coeff: 1.0,
                powers: vec![0, 0],
            }],
            q: vec![vec![-1.0, 0.0], vec![0.0, 0.0]],
        };
        assert!(PotentialSpec::custom(vec![term]).compile().is_err());
    }
}
