//! Closed-form values checked against the discretized operators.

use kflow::discrepancies::{chi2_divergence, fisher_rao2, mmd2};
use kflow::energies::{AnalyticDensity, DivergenceKind, EnergySpec, Potential};
use kflow::flows::{solve_flow, FlowSpec, GeometrySpec};
use kflow::{Grid, GridMeasure, KernelSpec, Measure, ParticleMeasure};

fn gaussian(g: &Grid, mean: f64, std: f64) -> GridMeasure {
    AnalyticDensity::Gaussian { mean, std, mass: 1.0 }.render(g).unwrap()
}

#[test]
fn kl_between_gaussians() {
    let g = Grid::new(-12.0, 12.0, 2001).unwrap();
    let (m1, s1, m2, s2): (f64, f64, f64, f64) = (0.4, 0.8, -0.3, 1.3);
    let e = EnergySpec::divergence(DivergenceKind::Kl, gaussian(&g, m2, s2));
    let want = (s2 / s1).ln() + (s1 * s1 + (m1 - m2) * (m1 - m2)) / (2.0 * s2 * s2) - 0.5;
    assert!((e.value(&gaussian(&g, m1, s1)).unwrap() - want).abs() < 1e-8);
}

#[test]
fn hellinger_between_gaussians() {
    let g = Grid::new(-12.0, 12.0, 2001).unwrap();
    let (m1, s1, m2, s2): (f64, f64, f64, f64) = (0.5, 0.9, -0.5, 1.1);
    let bc =
        (2.0 * s1 * s2 / (s1 * s1 + s2 * s2)).sqrt() * (-(m1 - m2) * (m1 - m2) / (4.0 * (s1 * s1 + s2 * s2))).exp();
    let got = fisher_rao2(&gaussian(&g, m1, s1), &gaussian(&g, m2, s2)).unwrap();
    assert!((got - 8.0 * (1.0 - bc)).abs() < 1e-8, "{got}");
}

#[test]
fn chi2_between_gaussians() {
    let g = Grid::new(-14.0, 14.0, 2801).unwrap();
    let (m1, s1, m2, s2): (f64, f64, f64, f64) = (0.3, 1.0, 0.0, 1.2);
    // int p^2/q - 1 for gaussians, valid when 2 s2^2 > s1^2
    let v = 2.0 * s2 * s2 - s1 * s1;
    let want = s2 * s2 / (s1 * v.sqrt()) * ((m1 - m2) * (m1 - m2) / v).exp() - 1.0;
    let got = chi2_divergence(&gaussian(&g, m1, s1), &gaussian(&g, m2, s2)).unwrap();
    assert!((got - want).abs() < 1e-7, "{got} {want}");
}

#[test]
fn gaussian_kernel_mmd_between_diracs() {
    let k = KernelSpec::gaussian(0.7);
    let a: Measure = ParticleMeasure::new(vec![vec![0.0]], vec![1.0]).unwrap().into();
    let b: Measure = ParticleMeasure::new(vec![vec![1.0]], vec![1.0]).unwrap().into();
    let want = 2.0 - 2.0 * (-1.0f64 / (2.0 * 0.49)).exp();
    assert!((mmd2(&k, &a, &b).unwrap() - want).abs() < 1e-14);
}

#[test]
fn fisher_rao_flow_of_a_constant_potential_decays_exponentially() {
    let g = Grid::new(-2.0, 2.0, 21).unwrap();
    let mu = GridMeasure::from_fn(g, |x| 1.0 + 0.5 * x.sin()).unwrap();
    let e = EnergySpec::Potential(Potential::Constant { value: 1.0 });
    let spec = FlowSpec::new(GeometrySpec::FisherRao, e, mu.clone(), 1.0, 0.01);
    let traj = solve_flow(&spec).unwrap();
    let last = traj.states.last().unwrap().as_grid().unwrap();
    let decay = (-1.0f64).exp();
    for (a, b) in last.density().iter().zip(mu.density()) {
        assert!((a - b * decay).abs() <= 1e-12 * b);
    }
}
