use mfa_core::action::{action, action_gradient};
use mfa_core::nbody::{momentum, optimize, OptimizeOptions};
use mfa_core::ot_hjb::{collapse, eulerian_action, legendre, Collapse, EulerianField1D};
use mfa_core::potentials::{MeanFieldLagrangian, Model, Potential, PotentialSpec};
use mfa_core::relaxation::{
    convex_order_check, relax, relax_noninteracting, RelaxOptions, VelocityGrid,
};
use mfa_core::vlasov::{dobrushin_solve, VlasovOptions};
use mfa_core::wasserstein::{wp, wp_bruteforce_equalweight, Metric};
use mfa_core::*;
use proptest::prelude::*;

fn smooth_psi() -> impl Strategy<Value = PotentialSpec> {
    prop_oneof![
        (0.5..2.0f64).prop_map(PotentialSpec::kinetic_scaled),
        Just(PotentialSpec::quadratic_kinetic()),
    ]
}

fn smooth_u() -> impl Strategy<Value = PotentialSpec> {
    prop_oneof![
        Just(PotentialSpec::zero()),
        (0.0..2.0f64).prop_map(PotentialSpec::quadratic_position),
        (-0.2..0.5f64).prop_map(PotentialSpec::velocity_quadratic),
        Just(PotentialSpec::gaussian_congestion()),
        (0.1..1.0f64, 0.0..2.0f64).prop_map(|(k, c)| PotentialSpec::flocking(k, c)),
    ]
}

fn even_u() -> impl Strategy<Value = PotentialSpec> {
    prop_oneof![
        Just(PotentialSpec::zero()),
        (0.0..2.0f64).prop_map(PotentialSpec::quadratic_position),
        Just(PotentialSpec::gaussian_congestion()),
    ]
}

fn coords(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.5..1.5f64, d)
}

fn statistic(n: std::ops::Range<usize>, d: usize) -> impl Strategy<Value = DiscreteStatistic> {
    prop::collection::vec((coords(d), coords(d), 0.1..1.0f64), n).prop_map(|atoms| {
        let total: f64 = atoms.iter().map(|a| a.2).sum();
        let atoms: Vec<_> = atoms
            .into_iter()
            .map(|(x, v, w)| (x, v, w / total))
            .collect();
        DiscreteStatistic::from_atoms(&atoms).unwrap()
    })
}

fn equal_weight(n: usize, d: usize) -> impl Strategy<Value = DiscreteStatistic> {
    prop::collection::vec((coords(d), coords(d)), n).prop_map(|pts| {
        DiscreteStatistic::uniform(
            pts.into_iter()
                .map(|(x, v)| PhasePoint::new(x, v).unwrap())
                .collect(),
        )
        .unwrap()
    })
}

fn ensemble(
    n: std::ops::Range<usize>,
    d: usize,
    steps: usize,
) -> impl Strategy<Value = PathEnsemble> {
    prop::collection::vec(prop::collection::vec(coords(d), steps + 1), n).prop_map(move |paths| {
        let w = vec![1.0 / paths.len() as f64; paths.len()];
        PathEnsemble::new(TimeGrid::new(1.0, steps).unwrap(), paths, w).unwrap()
    })
}

fn relabel(f: &DiscreteStatistic) -> DiscreteStatistic {
    let pts: Vec<PhasePoint> = f.points().iter().rev().cloned().collect();
    let w: Vec<f64> = f.weights().iter().rev().cloned().collect();
    DiscreteStatistic::new(pts, w).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn potential_gradient_matches_differences(
        spec in prop_oneof![smooth_psi(), smooth_u()],
        x in coords(2),
        v in coords(2),
    ) {
        let p = Potential::from_spec(&spec).unwrap();
        let (gx, gv) = p.grad(&x, &v);
        let h = 1e-6;
        for c in 0..2 {
            for (which, g) in [(0, &gx), (1, &gv)] {
                let (mut xp, mut vp, mut xm, mut vm) = (x.clone(), v.clone(), x.clone(), v.clone());
                if which == 0 { xp[c] += h; xm[c] -= h; } else { vp[c] += h; vm[c] -= h; }
                let fd = (p.value(&xp, &vp) - p.value(&xm, &vm)) / (2.0 * h);
                prop_assert!((fd - g[c]).abs() < 1e-6 * (1.0 + g[c].abs()));
            }
        }
    }

    #[test]
    fn even_interaction_is_symmetric(u in even_u(), dx in coords(2), dv in coords(2)) {
        let m = Model::new(&PotentialSpec::quadratic_kinetic(), &u, 2).unwrap();
        let nx: Vec<f64> = dx.iter().map(|a| -a).collect();
        let nv: Vec<f64> = dv.iter().map(|a| -a).collect();
        prop_assert!((m.u_value(&dx, &dv) - m.u_value(&nx, &nv)).abs() < 1e-12);
    }

    #[test]
    fn phi_ignores_atom_order(psi in smooth_psi(), u in smooth_u(), f in statistic(1..6, 2)) {
        let m = Model::new(&psi, &u, 2).unwrap();
        prop_assert!((m.phi(&f) - m.phi(&relabel(&f))).abs() < 1e-12 * (1.0 + m.phi(&f).abs()));
    }

    #[test]
    fn noninteracting_phi_is_linear(psi in smooth_psi(), f in statistic(1..4, 1), g in statistic(1..4, 1), t in 0.0..1.0f64) {
        let m = Model::new(&psi, &PotentialSpec::zero(), 1).unwrap();
        let mut atoms = Vec::new();
        for (p, w) in f.points().iter().zip(f.weights()) { atoms.push((p.x.clone(), p.v.clone(), t * w)); }
        for (p, w) in g.points().iter().zip(g.weights()) { atoms.push((p.x.clone(), p.v.clone(), (1.0 - t) * w)); }
        atoms.retain(|a| a.2 > 0.0);
        let mix = DiscreteStatistic::from_atoms(&atoms).unwrap();
        prop_assert!((m.phi(&mix) - t * m.phi(&f) - (1.0 - t) * m.phi(&g)).abs() < 1e-12);
    }

    #[test]
    fn legendre_is_an_involution(u in smooth_u(), f in statistic(1..4, 1), x in -1.0..1.0f64, v in -1.0..1.0f64) {
        let model = Model::new(&PotentialSpec::quadratic_kinetic(), &u, 1).unwrap();
        let lag = MeanFieldLagrangian::from_model(model, f).unwrap();
        prop_assume!(lag.hess(&[x], &[v])[(1, 1)] > 0.1);
        let p = lag.grad(&[x], &[v]).1[0];
        let (ls, _) = legendre(&lag, x, p, v).unwrap();
        prop_assert!((p * v - ls - lag.eval(&[x], &[v])).abs() < 1e-8);
    }

    #[test]
    fn wasserstein_matches_permutations(
        (f, g) in (1usize..6).prop_flat_map(|n| (equal_weight(n, 2), equal_weight(n, 2))),
        p in prop_oneof![Just(1.0), Just(2.0)],
    ) {
        let (lp, _) = wp(&f, &g, p, Metric::Phase).unwrap();
        let brute = wp_bruteforce_equalweight(&f, &g, p).unwrap();
        prop_assert!((lp - brute).abs() <= 1e-12 * (1.0 + brute));
    }

    #[test]
    fn wasserstein_metric_axioms(f in statistic(1..5, 1), g in statistic(1..5, 1), h in statistic(1..5, 1)) {
        let d = |a: &DiscreteStatistic, b: &DiscreteStatistic| wp(a, b, 1.0, Metric::Phase).unwrap().0;
        prop_assert!(d(&f, &f).abs() < 1e-12);
        prop_assert!((d(&f, &g) - d(&g, &f)).abs() < 1e-9);
        prop_assert!(d(&f, &h) <= d(&f, &g) + d(&g, &h) + 1e-9);
        prop_assert!(d(&f, &g) >= 0.0);
    }

    #[test]
    fn position_distance_is_dominated(f in statistic(1..5, 2), g in statistic(1..5, 2)) {
        let phase = wp(&f, &g, 2.0, Metric::Phase).unwrap().0;
        let pos = wp(&f, &g, 2.0, Metric::PositionOnly).unwrap().0;
        prop_assert!(pos <= phase + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn action_gradient_matches_differences(psi in smooth_psi(), u in smooth_u(), ens in ensemble(1..4, 2, 4)) {
        let g = action_gradient(&ens, &psi, &u).unwrap();
        let h = 1e-6;
        let base = ens.paths().to_vec();
        for k in 0..ens.len() {
            for i in 1..4 {
                for c in 0..2 {
                    let shifted = |s: f64| {
                        let mut p = base.clone();
                        p[k][i][c] += s;
                        let e = PathEnsemble::new(ens.grid(), p, ens.weights().to_vec()).unwrap();
                        action(&e, &psi, &u).unwrap().total
                    };
                    let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
                    let an = g[k][i - 1][c];
                    prop_assert!((fd - an).abs() < 1e-5 * (1.0 + an.abs()), "fd {} vs {}", fd, an);
                }
            }
        }
    }

    #[test]
    fn action_ignores_path_order(psi in smooth_psi(), u in smooth_u(), ens in ensemble(1..5, 1, 3)) {
        let mut p = ens.paths().to_vec();
        p.reverse();
        let rev = PathEnsemble::new(ens.grid(), p, ens.weights().to_vec()).unwrap();
        let a = action(&ens, &psi, &u).unwrap().total;
        let b = action(&rev, &psi, &u).unwrap().total;
        prop_assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
    }

    #[test]
    fn straight_paths_minimize_free_action(ens in ensemble(1..4, 2, 5)) {
        let straight = PathEnsemble::straight(&ens.endpoints(), ens.grid()).unwrap();
        let psi = PotentialSpec::quadratic_kinetic();
        let z = PotentialSpec::zero();
        prop_assert!(action(&straight, &psi, &z).unwrap().total <= action(&ens, &psi, &z).unwrap().total + 1e-12);
    }

    #[test]
    fn martingale_kernels_raise_convex_order(f in statistic(1..4, 1), spread in 0.1..1.0f64) {
        let rows = f.points().iter().map(|p| vec![
            (vec![p.v[0] - spread], 0.5),
            (vec![p.v[0] + spread], 0.5),
        ]).collect();
        let k = VelocityKernel::new(f.points().to_vec(), rows).unwrap();
        prop_assert!(is_martingale(&k, 1e-12));
        let g = apply_kernel(&f, &k).unwrap();
        prop_assert!(convex_order_check(&f, &g, 1e-9).unwrap().holds);
        let m = f.mean_velocity();
        let mg = g.mean_velocity();
        prop_assert!((m[0] - mg[0]).abs() < 1e-12);
    }

    #[test]
    fn convex_psi_is_its_own_relaxation(f in statistic(1..4, 1), s in 0.5..2.0f64) {
        let psi = PotentialSpec::kinetic_scaled(s);
        let phi = Model::new(&psi, &PotentialSpec::zero(), 1).unwrap().phi(&f);
        let rel = relax_noninteracting(&f, &psi).unwrap();
        prop_assert!((rel - phi).abs() < 1e-9 * (1.0 + phi));
    }

    #[test]
    fn relaxation_never_exceeds_phi(f in statistic(1..3, 1)) {
        let psi = PotentialSpec::two_well();
        let z = PotentialSpec::zero();
        let phi = Model::new(&psi, &z, 1).unwrap().phi(&f);
        let grid = VelocityGrid { radius: Some(2.0), points: 41 };
        let opts = RelaxOptions { starts: 2, ..RelaxOptions::default() };
        let r = relax(&f, &psi, &z, &grid, &opts).unwrap();
        prop_assert!(r.value <= phi + 1e-9);
        prop_assert!(r.value >= -1e-9);
        prop_assert!(r.mixture.is_martingale(1e-9));
    }

    #[test]
    fn histogram_collapse_does_not_raise_kinetic_energy(ens in ensemble(1..6, 1, 4)) {
        let psi = PotentialSpec::quadratic_kinetic();
        let z = PotentialSpec::zero();
        let field = collapse(&ens, -2.0, 2.0, 16, Collapse::Histogram).unwrap();
        let e = eulerian_action(&field, &psi, &z).unwrap();
        prop_assert!(e <= action(&ens, &psi, &z).unwrap().total + 1e-12);
    }

    #[test]
    fn field_csv_round_trip(ens in ensemble(1..5, 1, 3)) {
        let field = collapse(&ens, -2.0, 2.0, 8, Collapse::Quantile).unwrap();
        let back = EulerianField1D::from_csv(&field.to_csv(), field.grid, -2.0, 2.0, f64::INFINITY).unwrap();
        for (a, b) in field.rho.iter().flatten().zip(back.rho.iter().flatten()) {
            prop_assert!((a - b).abs() <= 1e-15 * (1.0 + a.abs()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn minimizers_conserve_momentum(u in even_u(), ens in ensemble(2..4, 1, 2)) {
        let psi = PotentialSpec::quadratic_kinetic();
        let grid = TimeGrid::new(1.0, 12).unwrap();
        let r = optimize(&ens.endpoints(), grid, &psi, &u, &OptimizeOptions::default()).unwrap();
        let model = Model::new(&psi, &u, 1).unwrap();
        let p = momentum(&model, &r.ensemble);
        for q in &p {
            prop_assert!((q[0] - p[0][0]).abs() < 10.0 * r.el_residual.max(1e-10));
        }
    }

    #[test]
    fn pairing_order_does_not_change_minimum(u in even_u(), ens in ensemble(2..4, 1, 2)) {
        let psi = PotentialSpec::quadratic_kinetic();
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let c = ens.endpoints();
        let mut pairs = c.pairs().to_vec();
        pairs.reverse();
        let rc = EndpointCoupling::uniform(pairs).unwrap();
        let a = optimize(&c, grid, &psi, &u, &OptimizeOptions::default()).unwrap().final_action;
        let b = optimize(&rc, grid, &psi, &u, &OptimizeOptions::default()).unwrap().final_action;
        prop_assert!((a - b).abs() < 1e-8 * (1.0 + a.abs()));
    }

    #[test]
    fn vlasov_flow_conserves_momentum_and_is_deterministic(u in even_u(), f in statistic(1..4, 1)) {
        let psi = PotentialSpec::quadratic_kinetic();
        let grid = TimeGrid::new(0.3, 30).unwrap();
        let a = dobrushin_solve(&f, grid, &psi, &u, &VlasovOptions::default()).unwrap();
        let b = dobrushin_solve(&f, grid, &psi, &u, &VlasovOptions::default()).unwrap();
        prop_assert_eq!(&a.x, &b.x);
        let w = f.weights();
        let total = |i: usize| (0..w.len()).map(|k| w[k] * a.p[i][k][0]).sum::<f64>();
        for i in 0..=30 {
            prop_assert!((total(i) - total(0)).abs() < 1e-8);
        }
    }
}
