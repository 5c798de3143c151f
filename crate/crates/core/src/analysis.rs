//! Numerical checks of the structural identities of the flows and the
//! small-ridge convergence study.
//!
//! Convergence of the ridge-regularized flows is measured as the largest
//! `L2(grid)` density error over the recorded times. This is a computable
//! stand-in for weak convergence at each time on a fixed grid.

use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::Corpus;
use crate::discrepancies::{
    chi2_divergence, fisher_rao2, flat_w2, flat_w2_dual, flattened_fr2, frk_dissipation, mmd2, mmd_dual_value,
    stein_dissipation,
};
use crate::energies::{DivergenceKind, EnergySpec};
use crate::error::{Error, Result};
use crate::flows::{dissipation_rate, rhs_grid, solve_flow, FlowSpec, GeometrySpec, Scheme, Tangent, Trajectory};
use crate::geodesics::{fr_geodesic, mmd_geodesic};
use crate::kernels::{gram, KernelSpec, WeightedOperator};
use crate::measures::{GridFunction, GridMeasure, Measure};
use crate::regression::{krr_alternative_gradient, krr_fit, KRRProblem};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DissipationReport {
    pub fd_rate: f64,
    pub formula_rate: f64,
    pub abs_err: f64,
}

/// Central difference `-(F(mu + dt v) - F(mu - dt v)) / (2 dt)` along the
/// tangent `v` against the closed-form dissipation of the geometry.
pub fn dissipation_identity_check(
    g: &GeometrySpec,
    e: &EnergySpec,
    mu: &GridMeasure,
    dt: f64,
) -> Result<DissipationReport> {
    let formula_rate = match g {
        GeometrySpec::KernelizedFr { kernel } => frk_dissipation(e, mu, kernel)?,
        GeometrySpec::Stein { kernel } => stein_dissipation(e, mu, kernel)?,
        _ => {
            return Err(Error::Incompatible(format!(
                "dissipation identity is defined for kernelized_fr and stein, not {}",
                g.name()
            )))
        }
    };
    let t = rhs_grid(g, e, mu)?;
    let moved = |s: f64| {
        GridMeasure::new(
            *mu.grid(),
            mu.density().iter().zip(&t.rate).map(|(m, r)| m + s * r).collect(),
        )
    };
    let fd_rate = if t.rate.iter().all(|&r| r == 0.0) {
        0.0
    } else {
        -(e.value(&moved(dt)?)? - e.value(&moved(-dt)?)?) / (2.0 * dt)
    };
    Ok(DissipationReport {
        fd_rate,
        formula_rate,
        abs_err: (fd_rate - formula_rate).abs(),
    })
}

/// Penalty `||f||_F^2` of the regression function class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegressionNorm {
    L2,
    /// `<f, K_mu^{-1} f>_{L2_mu}` with the operator jitter.
    Rkhs(KernelSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RayleighReport {
    pub j_diff: f64,
    pub r_diff: f64,
    pub defect: f64,
    pub scale: f64,
}

fn q_inner(a: &[f64], b: &[f64], q: &[f64]) -> f64 {
    a.iter().zip(b).zip(q).map(|((x, y), w)| x * y * w).sum()
}

/// Regression objective `J(f) = ||f - xi||^2 + lambda ||f||_F^2` against the
/// Rayleigh objective `R(f) = 2 dF/dt(mu^f) + ||f||^2 + lambda ||f||_F^2` with
/// `mu_dot = -mu f`. They differ by the constant `||xi||^2`.
pub fn rayleigh_equivalence_check(
    e: &EnergySpec,
    mu: &GridMeasure,
    f1: &GridFunction,
    f2: &GridFunction,
    lambda: f64,
    norm: RegressionNorm,
) -> Result<RayleighReport> {
    if f1.grid() != mu.grid() || f2.grid() != mu.grid() {
        return Err(Error::IncompatibleGrids);
    }
    let q = mu.node_weights();
    let w = mu.grid().weights();
    let xi = e.first_variation(mu)?.values;
    let op = match norm {
        RegressionNorm::L2 => None,
        RegressionNorm::Rkhs(k) => Some(WeightedOperator::new(gram(&k, &mu.grid().points())?, q.clone())?),
    };
    let penalty = |f: &[f64]| -> Result<f64> {
        match &op {
            None => Ok(q_inner(f, f, &q)),
            Some(op) => Ok(q_inner(f, &op.regularized_power(0.0, -1.0, f)?, &q)),
        }
    };
    let objectives = |f: &[f64]| -> Result<(f64, f64)> {
        let r: Vec<f64> = f.iter().zip(&xi).map(|(a, b)| a - b).collect();
        let pen = lambda * penalty(f)?;
        let j = q_inner(&r, &r, &q) + pen;
        let rate: Vec<f64> = f.iter().zip(mu.density()).map(|(a, m)| -m * a).collect();
        let df_dt = q_inner(&xi, &rate, &w);
        Ok((j, 2.0 * df_dt + q_inner(f, f, &q) + pen))
    };
    let (j1, r1) = objectives(f1.values())?;
    let (j2, r2) = objectives(f2.values())?;
    let j_diff = j1 - j2;
    let r_diff = r1 - r2;
    Ok(RayleighReport {
        j_diff,
        r_diff,
        defect: (j_diff - r_diff).abs(),
        scale: 1.0 + j1.abs() + j2.abs() + r1.abs() + r2.abs(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EdpReport {
    pub energy_start: f64,
    pub energy_end: f64,
    /// `int R(mu, mu_dot) dt`.
    pub primal: f64,
    /// `int R*(mu, -xi) dt`.
    pub dual: f64,
    /// `primal + dual`.
    pub dissipation: f64,
    /// `F(T) + dissipation - F(0)`; zero for an exact flow.
    pub defect: f64,
}

/// Primal and dual dissipation potentials at one state, with `mu_dot` taken
/// from the flow tangent of `g` at that state.
pub fn dissipation_potentials(g: &GeometrySpec, e: &EnergySpec, mu: &GridMeasure) -> Result<(f64, f64)> {
    let q = mu.node_weights();
    let xi = e.first_variation(mu)?.values;
    let t = rhs_grid(g, e, mu)?;
    let growth = |t: &crate::flows::GridTangent| -> Vec<f64> {
        t.rate
            .iter()
            .zip(mu.density())
            .map(|(r, m)| if *m > 0.0 { -r / m } else { 0.0 })
            .collect()
    };
    let spectral = |k: &KernelSpec, lambda: f64| -> Result<(f64, f64)> {
        let op = WeightedOperator::new(gram(k, &mu.grid().points())?, q.clone())?;
        let r = growth(&t);
        let (sig, b) = op.spectral_coefficients(&r)?;
        let floor = op.jitter().max(f64::MIN_POSITIVE);
        let primal = 0.5
            * sig
                .iter()
                .zip(&b)
                .map(|(s, b)| (s + lambda) / s.max(floor) * b * b)
                .sum::<f64>();
        let kxi = if lambda == 0.0 {
            op.apply(&xi)?
        } else {
            op.solve_regularized(lambda, &op.apply(&xi)?)?
        };
        Ok((primal, 0.5 * q_inner(&xi, &kxi, &q)))
    };
    match g {
        GeometrySpec::FisherRao => {
            let r = growth(&t);
            Ok((0.5 * q_inner(&r, &r, &q), 0.5 * q_inner(&xi, &xi, &q)))
        }
        GeometrySpec::KernelizedFr { kernel } => spectral(kernel, 0.0),
        GeometrySpec::KrrApproxFr { kernel, lambda } => spectral(kernel, *lambda),
        GeometrySpec::FlattenedFr { omega } => {
            let w = mu.grid().weights();
            let mut primal = 0.0;
            let mut dual = 0.0;
            for i in 0..w.len() {
                let o = omega.density()[i];
                if o > 0.0 {
                    primal += 0.5 * w[i] * t.rate[i] * t.rate[i] / o;
                }
                dual += 0.5 * w[i] * o * xi[i] * xi[i];
            }
            Ok((primal, dual))
        }
        _ => Err(Error::Incompatible(format!(
            "no dissipation potentials implemented for {}",
            g.name()
        ))),
    }
}

/// Energy-dissipation functional of a recorded grid trajectory (trapezoid rule in time).
pub fn edp_functional(traj: &Trajectory, g: &GeometrySpec, e: &EnergySpec) -> Result<EdpReport> {
    let states: Vec<&GridMeasure> = traj
        .states
        .iter()
        .map(|m| {
            m.as_grid()
                .ok_or_else(|| Error::Incompatible("EDP functional needs grid states".into()))
        })
        .collect::<Result<_>>()?;
    if states.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    let pots = states
        .iter()
        .map(|m| dissipation_potentials(g, e, m))
        .collect::<Result<Vec<_>>>()?;
    let mut primal = 0.0;
    let mut dual = 0.0;
    for k in 1..states.len() {
        let h = traj.times[k] - traj.times[k - 1];
        primal += 0.5 * h * (pots[k - 1].0 + pots[k].0);
        dual += 0.5 * h * (pots[k - 1].1 + pots[k].1);
    }
    let energy_start = e.value(states[0])?;
    let energy_end = e.value(states[states.len() - 1])?;
    let dissipation = primal + dual;
    Ok(EdpReport {
        energy_start,
        energy_end,
        primal,
        dual,
        dissipation,
        defect: energy_end + dissipation - energy_start,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GammaRow {
    pub lambda: f64,
    /// `max_t ||rho_lambda(t) - rho_FR(t)||_{L2(grid)}`.
    pub sup_error: f64,
    pub dissipation_lambda: f64,
    pub dissipation_fr: f64,
    pub edp_defect_lambda: f64,
    pub edp_defect_fr: f64,
}

fn l2_grid(a: &GridMeasure, b: &GridMeasure) -> f64 {
    let w = a.grid().weights();
    a.density()
        .iter()
        .zip(b.density())
        .zip(&w)
        .map(|((x, y), w)| w * (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Solves the ridge-approximate flow for each `lambda` (in parallel) and the
/// pure Fisher-Rao flow, and compares them. Rows follow the order of `lambdas`.
pub fn gamma_convergence_study(
    e: &EnergySpec,
    mu0: &GridMeasure,
    kernel: &KernelSpec,
    lambdas: &[f64],
    t_end: f64,
    dt: f64,
    record_every: usize,
) -> Result<Vec<GammaRow>> {
    if lambdas.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::InvalidArgument("ridge values must be positive".into()));
    }
    if lambdas.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::InvalidArgument(
            "ridge values must be strictly decreasing".into(),
        ));
    }
    let run = |g: GeometrySpec| -> Result<(Trajectory, EdpReport)> {
        let spec = FlowSpec::new(g.clone(), e.clone(), mu0.clone(), t_end, dt)
            .with_scheme(Scheme::Multiplicative)
            .with_record_every(record_every);
        let traj = solve_flow(&spec)?;
        let edp = edp_functional(&traj, &g, e)?;
        Ok((traj, edp))
    };
    let (fr, fr_edp) = run(GeometrySpec::FisherRao)?;
    lambdas
        .par_iter()
        .map(|&lambda| {
            let (traj, edp) = run(GeometrySpec::KrrApproxFr {
                kernel: *kernel,
                lambda,
            })?;
            let mut sup_error = 0.0f64;
            for (a, b) in traj.states.iter().zip(&fr.states) {
                if let (Measure::Grid(a), Measure::Grid(b)) = (a, b) {
                    sup_error = sup_error.max(l2_grid(a, b));
                }
            }
            Ok(GammaRow {
                lambda,
                sup_error,
                dissipation_lambda: edp.dissipation,
                dissipation_fr: fr_edp.dissipation,
                edp_defect_lambda: edp.defect,
                edp_defect_fr: fr_edp.defect,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LojasiewiczReport {
    pub s: f64,
    /// `dF/dt` along the ridge-approximate Fisher-Rao flow.
    pub rate: f64,
    /// `-||xi||^2 + lambda^s ||(K_mu + lambda)^{-s/2} xi||^2`, all in `L2_mu`.
    pub bound: f64,
    /// `bound - rate`; nonnegative when the inequality holds.
    pub slack: f64,
    /// `-||xi||^2 + lambda^s sum_j (lambda / (sigma_j + lambda))^(1-s) c_j^2 / (sigma_j + lambda)^s`,
    /// the spectral middle term, equal to `rate` for every `s`.
    pub chain: f64,
}

pub fn lojasiewicz_bound_check(
    e: &EnergySpec,
    mu: &GridMeasure,
    k: &KernelSpec,
    lambda: f64,
    s: f64,
) -> Result<LojasiewiczReport> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::InvalidArgument(format!("s must lie in [0, 1], got {s}")));
    }
    let q = mu.node_weights();
    let xi = e.first_variation(mu)?.values;
    let op = WeightedOperator::new(gram(k, &mu.grid().points())?, q.clone())?;
    let g = op.solve_regularized(lambda, &op.apply(&xi)?)?;
    let rate = -q_inner(&xi, &g, &q);
    let smoothed = if s == 0.0 {
        xi.clone()
    } else {
        op.regularized_power(lambda, -s, &xi)?
    };
    let bound = -q_inner(&xi, &xi, &q) + lambda.powf(s) * q_inner(&xi, &smoothed, &q);
    let (sig, c) = op.spectral_coefficients(&xi)?;
    let spectral: f64 = sig
        .iter()
        .zip(&c)
        .map(|(sg, c)| {
            let sl = sg.max(0.0) + lambda;
            (lambda / sl).powf(1.0 - s) * c * c / sl.powf(s)
        })
        .sum();
    let chain = -q_inner(&xi, &xi, &q) + lambda.powf(s) * spectral;
    Ok(LojasiewiczReport {
        s,
        rate,
        bound,
        slack: bound - rate,
        chain,
    })
}

/// Outcome of one identity check over a set of cases.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    /// Largest defect relative to its case scale.
    pub max_defect: f64,
    pub tolerance: f64,
}

struct Tally {
    name: &'static str,
    tolerance: f64,
    cases: usize,
    max_defect: f64,
    passed: bool,
}

impl Tally {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            tolerance,
            cases: 0,
            max_defect: 0.0,
            passed: true,
        }
    }

    /// Records `defect <= tolerance * scale`.
    fn add(&mut self, defect: f64, scale: f64) {
        self.cases += 1;
        let rel = defect / scale;
        if !(rel <= self.tolerance) {
            self.passed = false;
        }
        if rel.is_nan() || rel > self.max_defect {
            self.max_defect = rel;
        }
    }

    fn finish(self) -> Check {
        Check {
            name: self.name.into(),
            passed: self.passed,
            cases: self.cases,
            max_defect: self.max_defect,
            tolerance: self.tolerance,
        }
    }
}

fn all_geometries(c: &Corpus, k: KernelSpec) -> Vec<GeometrySpec> {
    let omega = GridMeasure::new(c.grid, vec![1.0; c.grid.len()]).expect("constant reference");
    vec![
        GeometrySpec::FisherRao,
        GeometrySpec::KernelizedFr { kernel: k },
        GeometrySpec::KrrApproxFr { kernel: k, lambda: 0.1 },
        GeometrySpec::FrRegMmd { kernel: k, lambda: 0.1 },
        GeometrySpec::MmdRegFr { kernel: k, lambda: 0.5 },
        GeometrySpec::Stein { kernel: k },
        GeometrySpec::RegularizedStein { kernel: k, lambda: 0.1 },
        GeometrySpec::WfrApprox {
            k_transport: k,
            k_reaction: k,
            lambda: 0.1,
        },
        GeometrySpec::FlattenedFr { omega },
    ]
}

/// Runs every identity check over the corpus.
pub fn verify_suite(c: &Corpus) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let gauss = c.kernels[0];

    let mut t = Tally::new("fr_geodesic_exactness", 1e-12);
    let mut tm = Tally::new("mmd_geodesic_exactness", 1e-10);
    for (a, b) in c.pairs() {
        let full = fisher_rao2(a, b)?;
        for (s, u) in [(0.25, 0.8), (0.0, 0.6), (0.4, 1.0)] {
            let d = fisher_rao2(&fr_geodesic(a, b, s)?, &fr_geodesic(a, b, u)?)?;
            t.add((d - (s - u) * (s - u) * full).abs(), 1.0);
            let m = mmd2(&gauss, &a.clone().into(), &b.clone().into())?;
            let gs: Measure = mmd_geodesic(a, b, s)?.0.into();
            let gu: Measure = mmd_geodesic(a, b, u)?.0.into();
            tm.add((mmd2(&gauss, &gs, &gu)? - (s - u) * (s - u) * m).abs(), 1.0);
        }
    }
    out.push(t.finish());
    out.push(tm.finish());

    let mut t = Tally::new("mmd_dual_tightness", 1e-8);
    for (a, b) in c.pairs() {
        for k in &c.kernels {
            let (am, bm): (Measure, Measure) = (a.clone().into(), b.clone().into());
            t.add((mmd_dual_value(k, &am, &bm)? - mmd2(k, &am, &bm)?).abs(), 1.0);
        }
    }
    out.push(t.finish());

    let mut td = Tally::new("frk_inclusive_kl_dissipation_is_mmd2", 1e-10);
    let mut tl = Tally::new("fr_mmd_equals_kernelized_fr_inclusive_kl", 1e-12);
    for (a, b) in c.pairs() {
        for k in &c.kernels {
            let e = EnergySpec::divergence(DivergenceKind::InclusiveKl, b.clone());
            let lhs = frk_dissipation(&e, a, k)?;
            td.add((lhs - mmd2(k, &a.clone().into(), &b.clone().into())?).abs(), 1.0);
            let t1 = rhs_grid(
                &GeometrySpec::FisherRao,
                &EnergySpec::Mmd {
                    target: b.clone().into(),
                    kernel: *k,
                },
                a,
            )?;
            let t2 = rhs_grid(&GeometrySpec::KernelizedFr { kernel: *k }, &e, a)?;
            let d = t1
                .rate
                .iter()
                .zip(&t2.rate)
                .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            tl.add(d, 1.0);
        }
    }
    out.push(td.finish());
    out.push(tl.finish());

    let mut t = Tally::new("flattened_fr_three_cases", 1e-10);
    for (a, b) in c.pairs() {
        t.add((flattened_fr2(a, b, b)? - chi2_divergence(a, b)?).abs(), 1.0);
        t.add((flattened_fr2(a, b, a)? - chi2_divergence(b, a)?).abs(), 1.0);
        let mid = fr_geodesic(a, b, 0.5)?;
        t.add((flattened_fr2(a, b, &mid)? - fisher_rao2(a, b)?).abs(), 1.0);
    }
    out.push(t.finish());

    let mut t = Tally::new("flat_w2_closed_form_vs_dual", 5e-6);
    let omega = GridMeasure::new(c.grid, vec![1.0; c.grid.len()])?;
    for (a, b) in c.pairs() {
        let b = b.scaled(a.mass() / b.mass());
        t.add(
            (flat_w2(a, &b, &omega)? - flat_w2_dual(a, &b, &omega)?.value).abs(),
            1.0,
        );
    }
    out.push(t.finish());

    let mut tn = Tally::new("krr_normal_equations", 1e-10);
    let mut ta = Tally::new("krr_alternative_minimizer", 1e-8);
    for (a, b) in c.pairs().take(5) {
        for k in &c.kernels {
            let xi = EnergySpec::divergence(DivergenceKind::Kl, b.clone())
                .first_variation(a)?
                .values;
            for lambda in [10.0, 1.0, 0.1, 0.01] {
                let p = KRRProblem::scalar(*k, a.clone(), xi.clone(), lambda)?;
                let op = p.operator()?;
                let g = krr_fit(&p)?;
                let norm = xi.iter().map(|x| x * x).sum::<f64>().sqrt();
                tn.add(op.residual(lambda, &g[0], &op.apply(&xi)?)?, 1.0 + norm);
                let grad = krr_alternative_gradient(&p, &g)?;
                ta.add(grad[0].iter().fold(0.0f64, |m, v| m.max(v.abs())), 1.0 + norm);
            }
        }
    }
    out.push(tn.finish());
    out.push(ta.finish());

    let mut t = Tally::new("rayleigh_equivalence", 1e-9);
    for (i, (a, b)) in c.pairs().enumerate() {
        let e = &c.energies(b)[i % 4];
        let f1 = GridFunction::from_fn(c.grid, |x| (0.3 * x + i as f64).sin())?;
        let f2 = GridFunction::from_fn(c.grid, |x| 0.1 * x * x - 0.5)?;
        for norm in [RegressionNorm::L2, RegressionNorm::Rkhs(c.kernels[i % 3])] {
            let r = rayleigh_equivalence_check(e, a, &f1, &f2, 0.1, norm)?;
            t.add(r.defect, r.scale);
        }
    }
    out.push(t.finish());

    let mut ts = Tally::new("lojasiewicz_nonnegative_slack", 1e-9);
    let mut t1 = Tally::new("lojasiewicz_s1_identity", 1e-10);
    let mut tc = Tally::new("lojasiewicz_spectral_chain", 1e-10);
    for (i, (a, b)) in c.pairs().enumerate() {
        let e = &c.energies(b)[i % 4];
        let k = &c.kernels[i % 3];
        for s in [0.0, 0.5, 1.0] {
            let r = lojasiewicz_bound_check(e, a, k, 0.1, s)?;
            let scale = 1.0 + r.rate.abs() + r.bound.abs();
            ts.add((-r.slack).max(0.0), scale);
            tc.add((r.chain - r.rate).abs(), scale);
            if s == 1.0 {
                t1.add(r.slack.abs(), scale);
            }
        }
    }
    out.push(ts.finish());
    out.push(t1.finish());
    out.push(tc.finish());

    let mut tsgn = Tally::new("dissipation_sign", 1e-9);
    let mut teq = Tally::new("equilibria_are_fixed_points", 1e-10);
    for (i, (a, b)) in c.pairs().enumerate().take(4) {
        let k = c.kernels[i % 3];
        let k = if k.is_differentiable() { k } else { gauss };
        for e in c.energies(b) {
            for g in all_geometries(c, k) {
                let t = rhs_grid(&g, &e, a)?;
                let d = dissipation_rate(&g, &e, &a.clone().into(), &Tangent::Grid(t))?;
                tsgn.add((-d).max(0.0), 1.0);
                let at = rhs_grid(&g, &e, b)?;
                teq.add(at.rate.iter().fold(0.0f64, |m, v| m.max(v.abs())), 1.0);
            }
        }
    }
    out.push(tsgn.finish());
    out.push(teq.finish());

    Ok(out)
}
