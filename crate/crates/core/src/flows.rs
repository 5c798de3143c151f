//! Gradient-flow right-hand sides for every supported geometry and a
//! fixed-step integrator that records diagnostics.
//!
//! With `xi = delta F / delta mu`:
//!
//! | geometry | grid rate |
//! |---|---|
//! | `FisherRao` | `-mu xi` |
//! | `KernelizedFr` | `-mu K_mu xi` |
//! | `KrrApproxFr` | `-mu (K_mu + lambda)^{-1} K_mu xi` |
//! | `MmdFlow` | `-K^{-1} xi` |
//! | `SphericalMmd` | `-K^{-1}(xi - c)`, `c` fixing the mass |
//! | `FrRegMmd` | `-mu (K_mu + lambda)^{-1} xi` |
//! | `MmdRegFr` | `-mu (lambda K_mu + I)^{-1} xi` |
//! | `Stein` | `div(mu K_mu grad xi)` |
//! | `RegularizedStein` | `div(mu v)`, `v = (K_mu + lambda)^{-1} K_mu grad xi` |
//! | `WfrApprox` | `div(mu v) - mu r`, both KRR fits |
//! | `FlattenedFr` | `-omega xi` |
//!
//! `K` without a subscript integrates against Lebesgue measure on the grid.
//! The kernelized geodesic boundary-value problem and the de-kernelized
//! Stein flow are not integrated here.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::energies::EnergySpec;
use crate::error::{Error, Result};
use crate::io::{fmt_g17, write_grid_measure, write_particles};
use crate::kernels::{gram, KernelSpec, WeightedOperator};
use crate::measures::{Grid, GridMeasure, Measure, ParticleMeasure};

#[derive(Debug, Clone, PartialEq)]
pub enum GeometrySpec {
    FisherRao,
    KernelizedFr {
        kernel: KernelSpec,
    },
    KrrApproxFr {
        kernel: KernelSpec,
        lambda: f64,
    },
    MmdFlow {
        kernel: KernelSpec,
    },
    SphericalMmd {
        kernel: KernelSpec,
    },
    FrRegMmd {
        kernel: KernelSpec,
        lambda: f64,
    },
    MmdRegFr {
        kernel: KernelSpec,
        lambda: f64,
    },
    Stein {
        kernel: KernelSpec,
    },
    RegularizedStein {
        kernel: KernelSpec,
        lambda: f64,
    },
    WfrApprox {
        k_transport: KernelSpec,
        k_reaction: KernelSpec,
        lambda: f64,
    },
    FlattenedFr {
        omega: GridMeasure,
    },
}

impl GeometrySpec {
    pub fn name(&self) -> &'static str {
        match self {
            GeometrySpec::FisherRao => "fisher_rao",
            GeometrySpec::KernelizedFr { .. } => "kernelized_fr",
            GeometrySpec::KrrApproxFr { .. } => "krr_approx_fr",
            GeometrySpec::MmdFlow { .. } => "mmd_flow",
            GeometrySpec::SphericalMmd { .. } => "spherical_mmd",
            GeometrySpec::FrRegMmd { .. } => "fr_reg_mmd",
            GeometrySpec::MmdRegFr { .. } => "mmd_reg_fr",
            GeometrySpec::Stein { .. } => "stein",
            GeometrySpec::RegularizedStein { .. } => "regularized_stein",
            GeometrySpec::WfrApprox { .. } => "wfr_approx",
            GeometrySpec::FlattenedFr { .. } => "flattened_fr",
        }
    }

    /// Geometries whose tangent has the form `-mu r`.
    pub fn is_pure_reaction(&self) -> bool {
        matches!(
            self,
            GeometrySpec::FisherRao
                | GeometrySpec::KernelizedFr { .. }
                | GeometrySpec::KrrApproxFr { .. }
                | GeometrySpec::FrRegMmd { .. }
                | GeometrySpec::MmdRegFr { .. }
        )
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |l: f64| {
            if l > 0.0 && l.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("lambda must be positive, got {l}")))
            }
        };
        let non_negative = |l: f64| {
            if l >= 0.0 && l.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("lambda must be non-negative, got {l}")))
            }
        };
        match self {
            GeometrySpec::FisherRao | GeometrySpec::FlattenedFr { .. } => Ok(()),
            GeometrySpec::KernelizedFr { kernel }
            | GeometrySpec::MmdFlow { kernel }
            | GeometrySpec::SphericalMmd { kernel }
            | GeometrySpec::Stein { kernel } => kernel.validate(),
            GeometrySpec::KrrApproxFr { kernel, lambda } | GeometrySpec::RegularizedStein { kernel, lambda } => {
                kernel.validate()?;
                positive(*lambda)
            }
            GeometrySpec::FrRegMmd { kernel, lambda } | GeometrySpec::MmdRegFr { kernel, lambda } => {
                kernel.validate()?;
                non_negative(*lambda)
            }
            GeometrySpec::WfrApprox {
                k_transport,
                k_reaction,
                lambda,
            } => {
                k_transport.validate()?;
                k_reaction.validate()?;
                positive(*lambda)
            }
        }
    }
}

/// Density rate on the grid; `growth` is `r` when the rate is `-mu r`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTangent {
    pub rate: Vec<f64>,
    pub growth: Option<Vec<f64>>,
}

/// Per-particle velocity and growth (`dw/dt = -w growth`).
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleTangent {
    pub velocity: Vec<Vec<f64>>,
    pub growth: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Tangent {
    Grid(GridTangent),
    Particles(ParticleTangent),
}

/// Kernel Gram matrices on a fixed grid, built once per flow.
#[derive(Debug, Default)]
struct GramCache {
    entries: Vec<(KernelSpec, DMatrix<f64>)>,
}

impl GramCache {
    fn get(&mut self, k: &KernelSpec, grid: &Grid) -> Result<DMatrix<f64>> {
        if let Some((_, g)) = self.entries.iter().find(|(kk, _)| kk == k) {
            return Ok(g.clone());
        }
        let g = gram(k, &grid.points())?;
        self.entries.push((*k, g.clone()));
        Ok(g)
    }
}

fn neg_times(mu: &[f64], r: &[f64]) -> Vec<f64> {
    mu.iter().zip(r).map(|(m, r)| -m * r).collect()
}

fn krr(op: &WeightedOperator, lambda: f64, f: &[f64]) -> Result<Vec<f64>> {
    op.solve_regularized(lambda, &op.apply(f)?)
}

fn grid_rhs(g: &GeometrySpec, e: &EnergySpec, mu: &GridMeasure, cache: &mut GramCache) -> Result<GridTangent> {
    let grid = *mu.grid();
    let rho = mu.density();
    let q = mu.node_weights();
    let fv = e.first_variation(mu)?;
    let xi = &fv.values;
    let op = |k: &KernelSpec, cache: &mut GramCache| -> Result<WeightedOperator> {
        WeightedOperator::new(cache.get(k, &grid)?, q.clone())
    };
    let reaction = |r: Vec<f64>| GridTangent {
        rate: neg_times(rho, &r),
        growth: Some(r),
    };
    let transport = |v: &[f64]| -> Vec<f64> {
        let flux: Vec<f64> = rho.iter().zip(v).map(|(m, v)| m * v).collect();
        grid.divergence(&flux)
    };
    Ok(match g {
        GeometrySpec::FisherRao => reaction(xi.clone()),
        GeometrySpec::KernelizedFr { kernel } => reaction(op(kernel, cache)?.apply(xi)?),
        GeometrySpec::KrrApproxFr { kernel, lambda } => reaction(krr(&op(kernel, cache)?, *lambda, xi)?),
        GeometrySpec::FrRegMmd { kernel, lambda } => reaction(op(kernel, cache)?.solve_regularized(*lambda, xi)?),
        GeometrySpec::MmdRegFr { kernel, lambda } => {
            if *lambda == 0.0 {
                reaction(xi.clone())
            } else {
                let s = op(kernel, cache)?.solve_regularized(1.0 / lambda, xi)?;
                reaction(s.into_iter().map(|v| v / lambda).collect())
            }
        }
        GeometrySpec::MmdFlow { kernel } => {
            let lebesgue = WeightedOperator::new(cache.get(kernel, &grid)?, grid.weights())?;
            let y = lebesgue.solve_regularized(0.0, xi)?;
            GridTangent {
                rate: y.into_iter().map(|v| -v).collect(),
                growth: None,
            }
        }
        GeometrySpec::SphericalMmd { kernel } => {
            let w = grid.weights();
            let lebesgue = WeightedOperator::new(cache.get(kernel, &grid)?, w.clone())?;
            let y = lebesgue.solve_regularized(0.0, xi)?;
            let z = lebesgue.solve_regularized(0.0, &vec![1.0; grid.len()])?;
            let iy: f64 = y.iter().zip(&w).map(|(a, b)| a * b).sum();
            let iz: f64 = z.iter().zip(&w).map(|(a, b)| a * b).sum();
            let c = iy / iz;
            let mut rate: Vec<f64> = y.iter().zip(&z).map(|(a, b)| -(a - c * b)).collect();
            // remove the last rounding residue of the mass constraint
            let drift: f64 = rate.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / iz;
            for (r, zi) in rate.iter_mut().zip(&z) {
                *r -= drift * zi;
            }
            GridTangent { rate, growth: None }
        }
        GeometrySpec::Stein { kernel } => {
            let v = op(kernel, cache)?.apply(&fv.gradient_1d())?;
            GridTangent {
                rate: transport(&v),
                growth: None,
            }
        }
        GeometrySpec::RegularizedStein { kernel, lambda } => {
            let v = krr(&op(kernel, cache)?, *lambda, &fv.gradient_1d())?;
            GridTangent {
                rate: transport(&v),
                growth: None,
            }
        }
        GeometrySpec::WfrApprox {
            k_transport,
            k_reaction,
            lambda,
        } => {
            let v = krr(&op(k_transport, cache)?, *lambda, &fv.gradient_1d())?;
            let r = krr(&op(k_reaction, cache)?, *lambda, xi)?;
            let t = transport(&v);
            GridTangent {
                rate: t.iter().zip(rho).zip(&r).map(|((t, m), r)| t - m * r).collect(),
                growth: None,
            }
        }
        GeometrySpec::FlattenedFr { omega } => {
            mu.same_grid(omega)?;
            GridTangent {
                rate: neg_times(omega.density(), xi),
                growth: None,
            }
        }
    })
}

fn grad_or_zero(k: &KernelSpec, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    match k.grad_x(x, y) {
        Ok(g) => Ok(g),
        Err(Error::NotDifferentiable) => Ok(vec![0.0; x.len()]),
        Err(e) => Err(e),
    }
}

/// Drift `a(x) = sum_c c score_c(x) - grad xi_rest(x)` and the total KL
/// coefficient, so the Stein velocity is `sum_j w_j [k a_j + C grad_{x_j} k]`.
fn svgd_drift(e: &EnergySpec, p: &ParticleMeasure) -> Result<(Vec<Vec<f64>>, f64)> {
    let kl = e.kl_terms()?;
    let fv = e.first_variation_particles(p)?;
    let mut a: Vec<Vec<f64>> = fv.gradient.iter().map(|g| g.iter().map(|v| -v).collect()).collect();
    let mut total = 0.0;
    for (c, target) in kl {
        total += c;
        for (ai, x) in a.iter_mut().zip(p.positions()) {
            for (v, s) in ai.iter_mut().zip(target.score(x)?) {
                *v += c * s;
            }
        }
    }
    Ok((a, total))
}

fn svgd_velocity(k: &KernelSpec, e: &EnergySpec, p: &ParticleMeasure) -> Result<Vec<Vec<f64>>> {
    let (a, c) = svgd_drift(e, p)?;
    let x = p.positions();
    let w = p.weights();
    let d = p.dim();
    let mut out = vec![vec![0.0; d]; p.len()];
    for (i, oi) in out.iter_mut().enumerate() {
        for j in 0..p.len() {
            if w[j] == 0.0 {
                continue;
            }
            let kij = k.eval(&x[j], &x[i])?;
            let g = if c != 0.0 {
                grad_or_zero(k, &x[j], &x[i])?
            } else {
                vec![0.0; d]
            };
            for m in 0..d {
                oi[m] += w[j] * (kij * a[j][m] + c * g[m]);
            }
        }
    }
    Ok(out)
}

/// `||phi||_H^2` of the Stein velocity field: the energy dissipation rate of
/// the particle Stein flow (the kernel Stein discrepancy for pure KL).
pub fn svgd_dissipation(k: &KernelSpec, e: &EnergySpec, p: &ParticleMeasure) -> Result<f64> {
    let (a, c) = svgd_drift(e, p)?;
    let x = p.positions();
    let w = p.weights();
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    let mut total = 0.0;
    for i in 0..p.len() {
        for j in 0..p.len() {
            let mut u = dot(&a[i], &a[j]) * k.eval(&x[i], &x[j])?;
            if c != 0.0 {
                // grad_y k(x, y) = grad_x k(y, x)
                u += c * dot(&a[i], &k.grad_x(&x[j], &x[i])?);
                u += c * dot(&k.grad_x(&x[i], &x[j])?, &a[j]);
                u += c * c * k.mixed_second(&x[i], &x[j])?;
            }
            total += w[i] * w[j] * u;
        }
    }
    Ok(total)
}

fn particle_krr(k: &KernelSpec, lambda: f64, p: &ParticleMeasure, f: &[f64]) -> Result<Vec<f64>> {
    krr(&WeightedOperator::from_atoms(k, &p.atoms())?, lambda, f)
}

fn particle_components(fv: &[Vec<f64>], d: usize) -> Vec<Vec<f64>> {
    (0..d).map(|c| fv.iter().map(|g| g[c]).collect()).collect()
}

fn particle_rhs(g: &GeometrySpec, e: &EnergySpec, p: &ParticleMeasure) -> Result<ParticleTangent> {
    let n = p.len();
    let d = p.dim();
    let still = vec![vec![0.0; d]; n];
    let needs_density = || {
        if e.has_divergence() {
            Err(Error::Incompatible(format!(
                "{} on particles needs an energy without divergence terms",
                g.name()
            )))
        } else {
            Ok(())
        }
    };
    let op = |k: &KernelSpec| WeightedOperator::from_atoms(k, &p.atoms());
    match g {
        GeometrySpec::Stein { kernel } => Ok(ParticleTangent {
            velocity: svgd_velocity(kernel, e, p)?,
            growth: vec![0.0; n],
        }),
        GeometrySpec::FisherRao
        | GeometrySpec::KernelizedFr { .. }
        | GeometrySpec::KrrApproxFr { .. }
        | GeometrySpec::FrRegMmd { .. }
        | GeometrySpec::MmdRegFr { .. } => {
            needs_density()?;
            let xi = e.first_variation_particles(p)?.values;
            let growth = match g {
                GeometrySpec::KernelizedFr { kernel } => op(kernel)?.apply(&xi)?,
                GeometrySpec::KrrApproxFr { kernel, lambda } => krr(&op(kernel)?, *lambda, &xi)?,
                GeometrySpec::FrRegMmd { kernel, lambda } => op(kernel)?.solve_regularized(*lambda, &xi)?,
                GeometrySpec::MmdRegFr { kernel, lambda } if *lambda > 0.0 => op(kernel)?
                    .solve_regularized(1.0 / lambda, &xi)?
                    .into_iter()
                    .map(|v| v / lambda)
                    .collect(),
                _ => xi,
            };
            Ok(ParticleTangent {
                velocity: still,
                growth,
            })
        }
        GeometrySpec::RegularizedStein { kernel, lambda } => {
            needs_density()?;
            let fv = e.first_variation_particles(p)?;
            let comps = particle_components(&fv.gradient, d)
                .iter()
                .map(|c| particle_krr(kernel, *lambda, p, c))
                .collect::<Result<Vec<_>>>()?;
            let velocity = (0..n).map(|i| (0..d).map(|c| -comps[c][i]).collect()).collect();
            Ok(ParticleTangent {
                velocity,
                growth: vec![0.0; n],
            })
        }
        GeometrySpec::WfrApprox {
            k_transport,
            k_reaction,
            lambda,
        } => {
            needs_density()?;
            let fv = e.first_variation_particles(p)?;
            let comps = particle_components(&fv.gradient, d)
                .iter()
                .map(|c| particle_krr(k_transport, *lambda, p, c))
                .collect::<Result<Vec<_>>>()?;
            let velocity = (0..n).map(|i| (0..d).map(|c| -comps[c][i]).collect()).collect();
            let growth = particle_krr(k_reaction, *lambda, p, &fv.values)?;
            Ok(ParticleTangent { velocity, growth })
        }
        GeometrySpec::MmdFlow { .. } | GeometrySpec::SphericalMmd { .. } | GeometrySpec::FlattenedFr { .. } => {
            Err(Error::Incompatible(format!(
                "{} evolves grid densities and cannot act on particles",
                g.name()
            )))
        }
    }
}

/// Tangent of the flow of `e` in geometry `g` at `mu`.
pub fn rhs(g: &GeometrySpec, e: &EnergySpec, mu: &Measure) -> Result<Tangent> {
    g.validate()?;
    match mu {
        Measure::Grid(m) => Ok(Tangent::Grid(grid_rhs(g, e, m, &mut GramCache::default())?)),
        Measure::Particles(p) => Ok(Tangent::Particles(particle_rhs(g, e, p)?)),
    }
}

/// Grid tangent, rejecting particle measures.
pub fn rhs_grid(g: &GeometrySpec, e: &EnergySpec, mu: &GridMeasure) -> Result<GridTangent> {
    g.validate()?;
    grid_rhs(g, e, mu, &mut GramCache::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    ExplicitEuler,
    /// `rho' = rho exp(-dt r)`; only for tangents of the form `-mu r`.
    Multiplicative,
}

/// One time step. Returns the new measure and the number of clipped nodes.
pub fn step(mu: &Measure, tangent: &Tangent, dt: f64, scheme: Scheme) -> Result<(Measure, usize)> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let blow_up = || Error::BlowUp { t: f64::NAN };
    match (mu, tangent) {
        (Measure::Grid(m), Tangent::Grid(t)) => {
            if t.rate.len() != m.grid().len() {
                return Err(Error::DimensionMismatch {
                    expected: m.grid().len(),
                    got: t.rate.len(),
                });
            }
            let mut clipped = 0;
            let rho: Vec<f64> = match scheme {
                Scheme::ExplicitEuler => m
                    .density()
                    .iter()
                    .zip(&t.rate)
                    .map(|(r, v)| {
                        let x = r + dt * v;
                        if x < 0.0 {
                            clipped += 1;
                            0.0
                        } else {
                            x
                        }
                    })
                    .collect(),
                Scheme::Multiplicative => {
                    let growth = t.growth.as_ref().ok_or_else(|| {
                        Error::Incompatible("multiplicative stepping needs a pure-reaction tangent".into())
                    })?;
                    m.density()
                        .iter()
                        .zip(growth)
                        .map(|(r, g)| r * (-dt * g).exp())
                        .collect()
                }
            };
            if rho.iter().any(|v| !v.is_finite()) {
                return Err(blow_up());
            }
            Ok((GridMeasure::new(*m.grid(), rho)?.into(), clipped))
        }
        (Measure::Particles(p), Tangent::Particles(t)) => {
            if t.velocity.len() != p.len() || t.growth.len() != p.len() {
                return Err(Error::DimensionMismatch {
                    expected: p.len(),
                    got: t.velocity.len(),
                });
            }
            let positions: Vec<Vec<f64>> = p
                .positions()
                .iter()
                .zip(&t.velocity)
                .map(|(x, v)| x.iter().zip(v).map(|(a, b)| a + dt * b).collect())
                .collect();
            let weights: Vec<f64> = p
                .weights()
                .iter()
                .zip(&t.growth)
                .map(|(w, g)| w * (-dt * g).exp())
                .collect();
            if positions.iter().flatten().chain(&weights).any(|v| !v.is_finite()) {
                return Err(blow_up());
            }
            Ok((ParticleMeasure::new(positions, weights)?.into(), 0))
        }
        _ => Err(Error::Incompatible("tangent does not match the measure type".into())),
    }
}

/// A discrepancy tracked along a flow against the spec's target.
#[derive(Debug, Clone, PartialEq)]
pub enum Diagnostic {
    Mmd2 { kernel: KernelSpec },
    FisherRao2,
    Chi2,
    ReverseChi2,
    Ksd2 { kernel: KernelSpec },
}

impl Diagnostic {
    pub fn name(&self) -> &'static str {
        match self {
            Diagnostic::Mmd2 { .. } => "mmd2",
            Diagnostic::FisherRao2 => "fisher_rao2",
            Diagnostic::Chi2 => "chi2",
            Diagnostic::ReverseChi2 => "reverse_chi2",
            Diagnostic::Ksd2 { .. } => "ksd2",
        }
    }

    pub fn evaluate(&self, mu: &Measure, target: &Measure) -> Result<f64> {
        use crate::discrepancies as d;
        if let Diagnostic::Mmd2 { kernel } = self {
            return d::mmd2(kernel, mu, target);
        }
        let (m, t) = match (mu.as_grid(), target.as_grid()) {
            (Some(m), Some(t)) => (m, t),
            _ => return Err(Error::Incompatible(format!("{} needs grid measures", self.name()))),
        };
        match self {
            Diagnostic::FisherRao2 => d::fisher_rao2(m, t),
            Diagnostic::Chi2 => d::chi2_divergence(m, t),
            Diagnostic::ReverseChi2 => d::chi2_divergence(t, m),
            Diagnostic::Ksd2 { kernel } => d::ksd2(m, t, kernel),
            Diagnostic::Mmd2 { .. } => unreachable!(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSpec {
    pub geometry: GeometrySpec,
    pub energy: EnergySpec,
    pub initial: Measure,
    pub t_end: f64,
    pub dt: f64,
    pub scheme: Scheme,
    pub record_every: usize,
    pub target: Option<Measure>,
    pub diagnostics: Vec<Diagnostic>,
}

impl FlowSpec {
    pub fn new(geometry: GeometrySpec, energy: EnergySpec, initial: impl Into<Measure>, t_end: f64, dt: f64) -> Self {
        let scheme = if geometry.is_pure_reaction() {
            Scheme::Multiplicative
        } else {
            Scheme::ExplicitEuler
        };
        Self {
            geometry,
            energy,
            initial: initial.into(),
            t_end,
            dt,
            scheme,
            record_every: 1,
            target: None,
            diagnostics: vec![],
        }
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_record_every(mut self, every: usize) -> Self {
        self.record_every = every;
        self
    }

    pub fn with_diagnostics(mut self, target: impl Into<Measure>, diagnostics: Vec<Diagnostic>) -> Self {
        self.target = Some(target.into());
        self.diagnostics = diagnostics;
        self
    }

    /// Number of fixed steps, `round(t_end / dt)`.
    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.energy.validate()?;
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "t_end must be positive, got {}",
                self.t_end
            )));
        }
        if !(self.dt > 0.0) || self.dt >= self.t_end {
            return Err(Error::InvalidArgument(format!(
                "dt must lie in (0, t_end), got {}",
                self.dt
            )));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidArgument("record_every must be positive".into()));
        }
        if self.scheme == Scheme::Multiplicative && !self.geometry.is_pure_reaction() {
            return Err(Error::Incompatible(format!(
                "multiplicative stepping is only defined for pure-reaction geometries, not {}",
                self.geometry.name()
            )));
        }
        if !self.diagnostics.is_empty() && self.target.is_none() {
            return Err(Error::InvalidArgument("diagnostics need a target measure".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRow {
    pub t: f64,
    pub energy: f64,
    pub mass: f64,
    /// `-dF/dt` along the tangent at this state.
    pub dissipation: f64,
    pub discrepancies: Vec<f64>,
    /// Nodes clipped at zero so far.
    pub clipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Measure>,
    pub diagnostics: Vec<DiagnosticRow>,
    pub discrepancy_names: Vec<String>,
}

/// Energy of either measure type; `NaN` where the energy needs a density the
/// particles do not have.
pub fn energy_of(e: &EnergySpec, mu: &Measure) -> Result<f64> {
    match mu {
        Measure::Grid(m) => e.value(m),
        Measure::Particles(p) => match e.value_particles(p) {
            Err(Error::Incompatible(_)) => Ok(f64::NAN),
            other => other,
        },
    }
}

/// `-dF/dt` for a tangent at `mu`.
pub fn dissipation_rate(g: &GeometrySpec, e: &EnergySpec, mu: &Measure, t: &Tangent) -> Result<f64> {
    match (mu, t) {
        (Measure::Grid(m), Tangent::Grid(t)) => {
            let xi = e.first_variation(m)?.values;
            let w = m.grid().weights();
            Ok(0.0 - xi.iter().zip(&t.rate).zip(&w).map(|((a, b), c)| a * b * c).sum::<f64>())
        }
        (Measure::Particles(p), Tangent::Particles(t)) => {
            if let GeometrySpec::Stein { kernel } = g {
                if !e.kl_terms()?.is_empty() && !kernel.is_differentiable() {
                    return Ok(f64::NAN);
                }
                return svgd_dissipation(kernel, e, p);
            }
            let fv = e.first_variation_particles(p)?;
            let mut s = 0.0;
            for i in 0..p.len() {
                let g: f64 = fv.gradient[i].iter().zip(&t.velocity[i]).map(|(a, b)| a * b).sum();
                s += p.weights()[i] * (fv.values[i] * t.growth[i] - g);
            }
            Ok(s)
        }
        _ => Err(Error::Incompatible("tangent does not match the measure type".into())),
    }
}

struct Stepper<'a> {
    spec: &'a FlowSpec,
    cache: GramCache,
}

impl Stepper<'_> {
    fn tangent(&mut self, mu: &Measure) -> Result<Tangent> {
        match mu {
            Measure::Grid(m) => Ok(Tangent::Grid(grid_rhs(
                &self.spec.geometry,
                &self.spec.energy,
                m,
                &mut self.cache,
            )?)),
            Measure::Particles(p) => Ok(Tangent::Particles(particle_rhs(
                &self.spec.geometry,
                &self.spec.energy,
                p,
            )?)),
        }
    }

    fn row(&self, t: f64, mu: &Measure, tangent: &Tangent, clipped: usize) -> Result<DiagnosticRow> {
        let spec = self.spec;
        let mut discrepancies = Vec::with_capacity(spec.diagnostics.len());
        if let Some(target) = &spec.target {
            for d in &spec.diagnostics {
                discrepancies.push(d.evaluate(mu, target)?);
            }
        }
        Ok(DiagnosticRow {
            t,
            energy: energy_of(&spec.energy, mu)?,
            mass: mu.mass(),
            dissipation: dissipation_rate(&spec.geometry, &spec.energy, mu, tangent)?,
            discrepancies,
            clipped,
        })
    }
}

/// Integrates the flow with fixed steps, recording every `record_every`
/// steps and at the final time.
pub fn solve_flow(spec: &FlowSpec) -> Result<Trajectory> {
    spec.validate()?;
    let n = spec.steps();
    let mut stepper = Stepper {
        spec,
        cache: GramCache::default(),
    };
    let mut traj = Trajectory {
        times: vec![],
        states: vec![],
        diagnostics: vec![],
        discrepancy_names: spec.diagnostics.iter().map(|d| d.name().to_string()).collect(),
    };
    let mut mu = spec.initial.clone();
    let mut clipped = 0;
    for k in 0..=n {
        let t = k as f64 * spec.dt;
        let attach = |e: Error| match e {
            Error::BlowUp { .. } => Error::BlowUp { t },
            other => other,
        };
        let tangent = stepper.tangent(&mu).map_err(attach)?;
        if k % spec.record_every == 0 || k == n {
            let row = stepper.row(t, &mu, &tangent, clipped).map_err(attach)?;
            traj.times.push(t);
            traj.states.push(mu.clone());
            traj.diagnostics.push(row);
        }
        if k == n {
            break;
        }
        let (next, c) = step(&mu, &tangent, spec.dt, spec.scheme).map_err(attach)?;
        clipped += c;
        mu = next;
    }
    Ok(traj)
}

/// Writes `diagnostics.csv` and `state_<k>.csv` for every recorded state.
pub fn write_trajectory(traj: &Trajectory, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut csv = String::from("t,energy,mass,dissipation");
    for name in &traj.discrepancy_names {
        csv.push(',');
        csv.push_str(name);
    }
    csv.push_str(",clipped\n");
    for row in &traj.diagnostics {
        let mut fields = vec![
            fmt_g17(row.t),
            fmt_g17(row.energy),
            fmt_g17(row.mass),
            fmt_g17(row.dissipation),
        ];
        fields.extend(row.discrepancies.iter().map(|v| fmt_g17(*v)));
        fields.push(row.clipped.to_string());
        csv.push_str(&fields.join(","));
        csv.push('\n');
    }
    fs::File::create(dir.join("diagnostics.csv"))?.write_all(csv.as_bytes())?;
    for (k, state) in traj.states.iter().enumerate() {
        let mut buf = Vec::new();
        match state {
            Measure::Grid(m) => write_grid_measure(m, &mut buf)?,
            Measure::Particles(p) => write_particles(p, &mut buf)?,
        }
        fs::write(dir.join(format!("state_{k}.csv")), buf)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energies::{AnalyticDensity, DivergenceKind, Potential, Reference};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid() -> Grid {
        Grid::new(-3.0, 3.0, 61).unwrap()
    }

    fn random_measure(rng: &mut ChaCha8Rng, g: Grid) -> GridMeasure {
        let a = rng.gen_range(-1.0..1.0);
        let s = rng.gen_range(0.5..1.2);
        let c = rng.gen_range(0.05..0.3);
        GridMeasure::from_fn(g, |x| (-(x - a) * (x - a) / (2.0 * s * s)).exp() + c).unwrap()
    }

    fn all_geometries(g: Grid) -> Vec<GeometrySpec> {
        let k = KernelSpec::gaussian(0.8);
        let l = KernelSpec::laplace(1.0);
        vec![
            GeometrySpec::FisherRao,
            GeometrySpec::KernelizedFr { kernel: k },
            GeometrySpec::KrrApproxFr { kernel: k, lambda: 0.1 },
            GeometrySpec::MmdFlow { kernel: l },
            GeometrySpec::SphericalMmd { kernel: l },
            GeometrySpec::FrRegMmd { kernel: k, lambda: 0.1 },
            GeometrySpec::MmdRegFr { kernel: k, lambda: 0.5 },
            GeometrySpec::Stein { kernel: k },
            GeometrySpec::RegularizedStein { kernel: k, lambda: 0.1 },
            GeometrySpec::WfrApprox {
                k_transport: k,
                k_reaction: l,
                lambda: 0.1,
            },
            GeometrySpec::FlattenedFr {
                omega: GridMeasure::new(g, vec![1.0; g.len()]).unwrap(),
            },
        ]
    }

    #[test]
    fn equilibria_are_fixed_points() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pi = random_measure(&mut rng, g);
        for kind in DivergenceKind::ALL {
            let e = EnergySpec::divergence(kind, pi.clone());
            for geo in all_geometries(g) {
                let t = rhs_grid(&geo, &e, &pi).unwrap();
                let m = t.rate.iter().fold(0.0f64, |a, b| a.max(b.abs()));
                assert!(m <= 1e-10, "{} {}: {m}", geo.name(), kind.name());
            }
        }
    }

    #[test]
    fn constant_potential_under_fisher_rao() {
        let g = grid();
        let mu = GridMeasure::from_fn(g, |x| 1.0 + 0.1 * x).unwrap();
        let e = EnergySpec::Potential(Potential::Constant { value: 2.5 });
        let t = rhs_grid(&GeometrySpec::FisherRao, &e, &mu).unwrap();
        for (r, m) in t.rate.iter().zip(mu.density()) {
            assert_eq!(*r, -2.5 * m);
        }
    }

    #[test]
    fn fr_with_mmd_energy_equals_kernelized_fr_with_inclusive_kl() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for k in [
            KernelSpec::gaussian(0.7),
            KernelSpec::laplace(0.5),
            KernelSpec::imq(1.2),
        ] {
            let mu = random_measure(&mut rng, g);
            let pi = random_measure(&mut rng, g);
            let a = rhs_grid(
                &GeometrySpec::FisherRao,
                &EnergySpec::Mmd {
                    target: pi.clone().into(),
                    kernel: k,
                },
                &mu,
            )
            .unwrap();
            let b = rhs_grid(
                &GeometrySpec::KernelizedFr { kernel: k },
                &EnergySpec::divergence(DivergenceKind::InclusiveKl, pi.clone()),
                &mu,
            )
            .unwrap();
            // independent oracle: -mu_i sum_j k(x_i, x_j) w_j (mu_j - pi_j)
            let x = g.nodes();
            let w = g.weights();
            for i in 0..g.len() {
                let s: f64 = (0..g.len())
                    .map(|j| k.eval(&[x[i]], &[x[j]]).unwrap() * w[j] * (mu.density()[j] - pi.density()[j]))
                    .sum();
                let want = -mu.density()[i] * s;
                assert!((a.rate[i] - want).abs() <= 1e-12);
                assert!((b.rate[i] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn krr_approx_tends_to_fisher_rao() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mu = random_measure(&mut rng, g);
        let pi = random_measure(&mut rng, g);
        let e = EnergySpec::divergence(DivergenceKind::Kl, pi);
        let k = KernelSpec::gaussian(0.5);
        let fr = rhs_grid(&GeometrySpec::FisherRao, &e, &mu).unwrap();
        let mut prev = f64::INFINITY;
        for lambda in [1.0, 0.1, 0.01, 0.001] {
            let t = rhs_grid(&GeometrySpec::KrrApproxFr { kernel: k, lambda }, &e, &mu).unwrap();
            let d = t
                .rate
                .iter()
                .zip(&fr.rate)
                .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
            assert!(d < prev, "{lambda}: {d}");
            prev = d;
        }
    }

    #[test]
    fn large_ridge_recovers_kernelized_fr() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mu = random_measure(&mut rng, g);
        let pi = random_measure(&mut rng, g);
        let e = EnergySpec::divergence(DivergenceKind::Kl, pi);
        let k = KernelSpec::gaussian(0.5);
        let kfr = rhs_grid(&GeometrySpec::KernelizedFr { kernel: k }, &e, &mu).unwrap();
        let lambda = 1e6;
        let t = rhs_grid(&GeometrySpec::KrrApproxFr { kernel: k, lambda }, &e, &mu).unwrap();
        let scale = kfr.rate.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        for (a, b) in t.rate.iter().zip(&kfr.rate) {
            assert!((lambda * a - b).abs() <= 1e-4 * scale);
        }
    }

    #[test]
    fn dissipation_is_nonnegative_and_mass_rules_hold() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = g.weights();
        for _ in 0..3 {
            let mu = random_measure(&mut rng, g);
            let pi = random_measure(&mut rng, g);
            for kind in DivergenceKind::ALL {
                let e = EnergySpec::divergence(kind, pi.clone());
                for geo in all_geometries(g) {
                    let t = rhs_grid(&geo, &e, &mu).unwrap();
                    let d = dissipation_rate(&geo, &e, &mu.clone().into(), &Tangent::Grid(t.clone())).unwrap();
                    assert!(d >= -1e-9, "{} {}: {d}", geo.name(), kind.name());
                    let dm: f64 = t.rate.iter().zip(&w).map(|(a, b)| a * b).sum();
                    match geo {
                        GeometrySpec::SphericalMmd { .. } => assert!(dm.abs() <= 1e-10, "{dm}"),
                        GeometrySpec::Stein { .. } | GeometrySpec::RegularizedStein { .. } => {
                            assert!(dm.abs() <= 1e-10 * (1.0 + t.rate.iter().map(|v| v.abs()).sum::<f64>()))
                        }
                        _ => {}
                    }
                }
            }
        }
    }

    #[test]
    fn stein_dissipation_matches_ksd() {
        let g = Grid::new(-5.0, 5.0, 201).unwrap();
        let mu = AnalyticDensity::Gaussian {
            mean: 0.0,
            std: 1.0,
            mass: 1.0,
        }
        .render(&g)
        .unwrap();
        let pi = AnalyticDensity::Gaussian {
            mean: 0.7,
            std: 0.9,
            mass: 1.0,
        }
        .render(&g)
        .unwrap();
        let k = KernelSpec::gaussian(1.0);
        let e = EnergySpec::divergence(DivergenceKind::Kl, pi.clone());
        let geo = GeometrySpec::Stein { kernel: k };
        let t = rhs(&geo, &e, &mu.clone().into()).unwrap();
        let d = dissipation_rate(&geo, &e, &mu.clone().into(), &t).unwrap();
        let ksd = crate::discrepancies::ksd2(&mu, &pi, &k).unwrap();
        assert!((d - ksd).abs() <= 1e-12 * (1.0 + ksd), "{d} {ksd}");
    }

    #[test]
    fn step_examples() {
        let g = Grid::new(0.0, 1.0, 3).unwrap();
        let mu: Measure = GridMeasure::new(g, vec![0.1, 1.0, 2.0]).unwrap().into();
        let zero = Tangent::Grid(GridTangent {
            rate: vec![0.0; 3],
            growth: Some(vec![0.0; 3]),
        });
        assert_eq!(step(&mu, &zero, 0.3, Scheme::ExplicitEuler).unwrap(), (mu.clone(), 0));
        let one = Tangent::Grid(GridTangent {
            rate: vec![-0.1, -1.0, -2.0],
            growth: Some(vec![1.0; 3]),
        });
        let (half, _) = step(&mu, &one, std::f64::consts::LN_2, Scheme::Multiplicative).unwrap();
        for (a, b) in half.as_grid().unwrap().density().iter().zip([0.05, 0.5, 1.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        let down = Tangent::Grid(GridTangent {
            rate: vec![-1.0, 0.0, 0.0],
            growth: None,
        });
        let (clipped, c) = step(&mu, &down, 0.2, Scheme::ExplicitEuler).unwrap();
        assert_eq!(c, 1);
        assert_eq!(clipped.as_grid().unwrap().density()[0], 0.0);
        assert!(step(&mu, &down, 0.2, Scheme::Multiplicative).is_err());
        let huge = Tangent::Grid(GridTangent {
            rate: vec![f64::MAX; 3],
            growth: None,
        });
        assert!(matches!(
            step(&mu, &huge, 10.0, Scheme::ExplicitEuler),
            Err(Error::BlowUp { .. })
        ));
    }

    #[test]
    fn particle_step_moves_and_reweights() {
        let p: Measure = ParticleMeasure::new(vec![vec![0.0], vec![1.0]], vec![1.0, 2.0])
            .unwrap()
            .into();
        let t = Tangent::Particles(ParticleTangent {
            velocity: vec![vec![1.0], vec![-2.0]],
            growth: vec![0.0, 1.0],
        });
        let (q, _) = step(&p, &t, 0.5, Scheme::ExplicitEuler).unwrap();
        let q = q.as_particles().unwrap().clone();
        assert_eq!(q.positions(), &[vec![0.5], vec![0.0]]);
        assert!((q.weights()[1] - 2.0 * (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn stationary_and_exponential_trajectories() {
        let g = grid();
        let pi = GridMeasure::from_fn(g, |x| (-x * x / 2.0).exp()).unwrap();
        let e = EnergySpec::divergence(DivergenceKind::Kl, pi.clone());
        let spec = FlowSpec::new(GeometrySpec::FisherRao, e, pi.clone(), 1.0, 0.1);
        let traj = solve_flow(&spec).unwrap();
        assert_eq!(traj.times.len(), 11);
        assert!(traj.diagnostics.iter().all(|r| r.energy == 0.0));
        let e1 = EnergySpec::Potential(Potential::Constant { value: 1.0 });
        let spec = FlowSpec::new(GeometrySpec::FisherRao, e1, pi.clone(), 1.0, 0.01).with_record_every(10);
        let traj = solve_flow(&spec).unwrap();
        assert_eq!(traj.times.len(), 11);
        let m0 = pi.mass();
        for r in &traj.diagnostics {
            assert!((r.mass - m0 * (-r.t).exp()).abs() <= 1e-12, "{} {}", r.t, r.mass);
        }
    }

    #[test]
    fn spherical_mmd_preserves_mass() {
        let g = Grid::new(-3.0, 3.0, 81).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mu = random_measure(&mut rng, g);
        let pi = random_measure(&mut rng, g);
        let pi = pi.scaled(mu.mass() / pi.mass());
        let k = KernelSpec::laplace(1.0);
        let e = EnergySpec::Mmd {
            target: pi.into(),
            kernel: k,
        };
        let spec =
            FlowSpec::new(GeometrySpec::SphericalMmd { kernel: k }, e, mu.clone(), 1.0, 1e-3).with_record_every(50);
        let traj = solve_flow(&spec).unwrap();
        for r in &traj.diagnostics {
            assert!((r.mass - mu.mass()).abs() <= 1e-8, "{}", r.mass - mu.mass());
            assert_eq!(r.clipped, 0);
        }
        let en: Vec<f64> = traj.diagnostics.iter().map(|r| r.energy).collect();
        assert!(en.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn energy_decreases_along_flows() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mu = random_measure(&mut rng, g);
        let pi = random_measure(&mut rng, g);
        for geo in all_geometries(g) {
            if matches!(geo, GeometrySpec::MmdFlow { .. } | GeometrySpec::SphericalMmd { .. }) {
                continue;
            }
            let e = EnergySpec::divergence(DivergenceKind::Kl, pi.clone());
            let spec = FlowSpec::new(geo.clone(), e, mu.clone(), 0.2, 1e-3).with_record_every(20);
            let traj = solve_flow(&spec).unwrap();
            for w in traj.diagnostics.windows(2) {
                assert!(
                    w[1].energy <= w[0].energy + 1e-6,
                    "{}: {} -> {}",
                    geo.name(),
                    w[0].energy,
                    w[1].energy
                );
            }
        }
    }

    #[test]
    fn svgd_velocity_matches_hand_formula() {
        let k = KernelSpec::gaussian(1.0);
        let p = ParticleMeasure::new(vec![vec![0.0], vec![1.0]], vec![0.5, 0.5]).unwrap();
        let target = Reference::Analytic(AnalyticDensity::Gaussian {
            mean: 0.0,
            std: 1.0,
            mass: 1.0,
        });
        let e = EnergySpec::PhiDivergence {
            kind: DivergenceKind::Kl,
            target,
        };
        let t = particle_rhs(&GeometrySpec::Stein { kernel: k }, &e, &p).unwrap();
        let ex = (-0.5f64).exp();
        // particle 0: 0.5 [1 * 0 + 0] + 0.5 [e * (-1) + d/dx_j k(x_j, 0) at x_j = 1 = -e]
        let v0 = 0.5 * (-ex - ex);
        // particle 1: 0.5 [e * 0 + grad_{x_j} k(x_j, 1) at x_j = 0 = e] + 0.5 [1 * (-1) + 0]
        let v1 = 0.5 * ex - 0.5;
        assert!((t.velocity[0][0] - v0).abs() < 1e-15);
        assert!((t.velocity[1][0] - v1).abs() < 1e-15);
        let d = svgd_dissipation(&k, &e, &p).unwrap();
        assert!(d > 0.0);
    }

    #[test]
    fn particle_compatibility() {
        let p: Measure = ParticleMeasure::new(vec![vec![0.0], vec![1.0]], vec![0.5, 0.5])
            .unwrap()
            .into();
        let pi = GridMeasure::new(grid(), vec![1.0; 61]).unwrap();
        let kl = EnergySpec::divergence(DivergenceKind::Kl, pi);
        assert!(matches!(
            rhs(&GeometrySpec::FisherRao, &kl, &p),
            Err(Error::Incompatible(_))
        ));
        let k = KernelSpec::gaussian(1.0);
        assert!(matches!(
            rhs(&GeometrySpec::MmdFlow { kernel: k }, &kl, &p),
            Err(Error::Incompatible(_))
        ));
        let mmd = EnergySpec::Mmd {
            target: p.clone(),
            kernel: k,
        };
        let t = rhs(&GeometrySpec::KernelizedFr { kernel: k }, &mmd, &p).unwrap();
        assert_eq!(
            t,
            Tangent::Particles(ParticleTangent {
                velocity: vec![vec![0.0]; 2],
                growth: vec![0.0; 2]
            })
        );
    }

    #[test]
    fn trajectory_export_layout() {
        let g = Grid::new(0.0, 1.0, 3).unwrap();
        let mu = GridMeasure::new(g, vec![1.0; 3]).unwrap();
        let e = EnergySpec::Potential(Potential::Constant { value: 0.0 });
        let spec = FlowSpec::new(GeometrySpec::FisherRao, e, mu.clone(), 0.2, 0.1)
            .with_diagnostics(mu, vec![Diagnostic::FisherRao2]);
        let traj = solve_flow(&spec).unwrap();
        let dir = std::env::temp_dir().join(format!("kflow-flow-export-{}", std::process::id()));
        write_trajectory(&traj, &dir).unwrap();
        let text = fs::read_to_string(dir.join("diagnostics.csv")).unwrap();
        assert_eq!(text, "t,energy,mass,dissipation,fisher_rao2,clipped\n0,0,1,0,0,0\n0.10000000000000001,0,1,0,0,0\n0.20000000000000001,0,1,0,0,0\n");
        assert!(dir.join("state_2.csv").exists());
        fs::remove_dir_all(dir).unwrap();
    }
}
