use kflow::analysis::{lojasiewicz_bound_check, rayleigh_equivalence_check, RegressionNorm};
use kflow::discrepancies::{fisher_rao2, mmd2, mmd_dual_value};
use kflow::energies::{DivergenceKind, EnergySpec};
use kflow::flows::{dissipation_rate, rhs_grid, GeometrySpec, Tangent};
use kflow::geodesics::fr_geodesic;
use kflow::io::{read_grid_measure, write_grid_measure};
use kflow::regression::krr_fit_grid;
use kflow::{Grid, GridFunction, GridMeasure, KernelSpec};
use proptest::prelude::*;

fn grid() -> Grid {
    Grid::new(-3.0, 3.0, 31).unwrap()
}

fn positive_measure() -> impl Strategy<Value = GridMeasure> {
    prop::collection::vec(0.05f64..3.0, 31).prop_map(|d| GridMeasure::new(grid(), d).unwrap())
}

fn grid_function() -> impl Strategy<Value = GridFunction> {
    prop::collection::vec(-2.0f64..2.0, 31).prop_map(|v| GridFunction::new(grid(), v).unwrap())
}

fn kernel() -> impl Strategy<Value = KernelSpec> {
    (0usize..3, 0.4f64..1.6).prop_map(|(f, bw)| match f {
        0 => KernelSpec::gaussian(bw),
        1 => KernelSpec::laplace(bw),
        _ => KernelSpec::imq(bw),
    })
}

fn kind() -> impl Strategy<Value = DivergenceKind> {
    prop::sample::select(DivergenceKind::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fisher_rao_geodesic_is_constant_speed(a in positive_measure(), b in positive_measure(), s in 0.0f64..1.0, t in 0.0f64..1.0) {
        let full = fisher_rao2(&a, &b).unwrap();
        let d = fisher_rao2(&fr_geodesic(&a, &b, s).unwrap(), &fr_geodesic(&a, &b, t).unwrap()).unwrap();
        prop_assert!((d - (s - t) * (s - t) * full).abs() <= 1e-12 * (1.0 + full));
    }

    #[test]
    fn fisher_rao_is_a_symmetric_squared_distance(a in positive_measure(), b in positive_measure()) {
        prop_assert_eq!(fisher_rao2(&a, &a).unwrap(), 0.0);
        prop_assert!(fisher_rao2(&a, &b).unwrap() >= 0.0);
        prop_assert!((fisher_rao2(&a, &b).unwrap() - fisher_rao2(&b, &a).unwrap()).abs() <= 1e-14);
    }

    #[test]
    fn mmd_dual_is_tight(a in positive_measure(), b in positive_measure(), k in kernel()) {
        let (am, bm) = (a.into(), b.into());
        let m = mmd2(&k, &am, &bm).unwrap();
        prop_assert!(m >= -1e-14);
        prop_assert!((mmd_dual_value(&k, &am, &bm).unwrap() - m).abs() <= 1e-8);
    }

    #[test]
    fn dissipation_is_nonnegative(a in positive_measure(), b in positive_measure(), kd in kind(), bw in 0.5f64..1.5) {
        let e = EnergySpec::divergence(kd, b);
        let k = KernelSpec::gaussian(bw);
        for g in [
            GeometrySpec::FisherRao,
            GeometrySpec::KernelizedFr { kernel: k },
            GeometrySpec::KrrApproxFr { kernel: k, lambda: 0.05 },
            GeometrySpec::Stein { kernel: k },
            GeometrySpec::RegularizedStein { kernel: k, lambda: 0.05 },
        ] {
            let t = rhs_grid(&g, &e, &a).unwrap();
            let d = dissipation_rate(&g, &e, &a.clone().into(), &Tangent::Grid(t)).unwrap();
            prop_assert!(d >= -1e-10, "{}: {}", g.name(), d);
        }
    }

    #[test]
    fn reaction_flows_fix_their_target(b in positive_measure(), kd in kind(), k in kernel()) {
        let e = EnergySpec::divergence(kd, b.clone());
        for g in [GeometrySpec::FisherRao, GeometrySpec::KernelizedFr { kernel: k }, GeometrySpec::KrrApproxFr { kernel: k, lambda: 0.1 }] {
            let t = rhs_grid(&g, &e, &b).unwrap();
            prop_assert!(t.rate.iter().all(|r| r.abs() <= 1e-12));
        }
    }

    #[test]
    fn krr_shrinks_as_the_ridge_grows(a in positive_measure(), f in grid_function(), k in kernel()) {
        let q = a.node_weights();
        let norm = |g: &GridFunction| g.values().iter().zip(&q).map(|(v, w)| w * v * v).sum::<f64>();
        let mut prev = f64::INFINITY;
        for lambda in [0.01, 0.1, 1.0, 10.0] {
            let n = norm(&krr_fit_grid(&k, &a, &f, lambda).unwrap());
            prop_assert!(n <= prev * (1.0 + 1e-9) + 1e-14);
            prop_assert!(n <= norm(&f) * (1.0 + 1e-9) + 1e-14);
            prev = n;
        }
    }

    #[test]
    fn rayleigh_and_regression_objectives_agree(
        a in positive_measure(), b in positive_measure(), kd in kind(),
        f1 in grid_function(), f2 in grid_function(), lambda in 0.0f64..2.0, k in kernel(),
    ) {
        let e = EnergySpec::divergence(kd, b);
        for norm in [RegressionNorm::L2, RegressionNorm::Rkhs(k)] {
            let r = rayleigh_equivalence_check(&e, &a, &f1, &f2, lambda, norm).unwrap();
            prop_assert!(r.defect <= 1e-9 * r.scale);
        }
    }

    #[test]
    fn lojasiewicz_slack_is_nonnegative(a in positive_measure(), b in positive_measure(), kd in kind(), k in kernel(), lambda in 0.01f64..1.0, s in 0.0f64..1.0) {
        let r = lojasiewicz_bound_check(&EnergySpec::divergence(kd, b), &a, &k, lambda, s).unwrap();
        prop_assert!(r.slack >= -1e-9 * (1.0 + r.rate.abs()));
    }

    #[test]
    fn grid_measure_csv_round_trips(a in positive_measure()) {
        let mut buf = Vec::new();
        write_grid_measure(&a, &mut buf).unwrap();
        let back = read_grid_measure(buf.as_slice()).unwrap();
        prop_assert_eq!(back.density(), a.density());
        let mut again = Vec::new();
        write_grid_measure(&back, &mut again).unwrap();
        prop_assert_eq!(buf, again);
    }
}
