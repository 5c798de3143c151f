//! Energy functionals and their first variations.
//!
//! Divergences use the unbalanced conventions on non-negative measures
//! (`phi(1) = phi'(1) = 0`), so that the first variation of each energy is
//! exactly `phi'(dmu/dpi)`:
//!
//! | kind           | energy                              | first variation      |
//! |----------------|-------------------------------------|----------------------|
//! | `kl`           | `int mu log(mu/pi) - mu + pi`       | `log(mu/pi)`         |
//! | `inclusive_kl` | `int pi log(pi/mu) - pi + mu`       | `1 - pi/mu`          |
//! | `chi2`         | `int (mu/pi - 1)^2 dpi`             | `2 (mu/pi - 1)`      |
//! | `hellinger`    | `4 int (sqrt mu - sqrt pi)^2`       | `4 (1 - sqrt(pi/mu))`|

use serde::{Deserialize, Serialize};

use crate::discrepancies::mmd2_atoms;
use crate::error::{Error, Result};
use crate::kernels::{kernel_mean_embedding, KernelSpec};
use crate::measures::{floored, Grid, GridFunction, GridMeasure, Measure, ParticleMeasure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceKind {
    Kl,
    InclusiveKl,
    Chi2,
    Hellinger,
}

impl DivergenceKind {
    pub const ALL: [DivergenceKind; 4] = [
        DivergenceKind::Kl,
        DivergenceKind::InclusiveKl,
        DivergenceKind::Chi2,
        DivergenceKind::Hellinger,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            DivergenceKind::Kl => "kl",
            DivergenceKind::InclusiveKl => "inclusive_kl",
            DivergenceKind::Chi2 => "chi2",
            DivergenceKind::Hellinger => "hellinger",
        }
    }

    /// Integrand of the energy at one node (both densities raw, logs and
    /// ratios floored).
    fn density_term(&self, mu: f64, pi: f64) -> f64 {
        let (mf, pf) = (floored(mu), floored(pi));
        match self {
            DivergenceKind::Kl => {
                let ent = if mu > 0.0 { mu * (mf / pf).ln() } else { 0.0 };
                ent - mu + pi
            }
            DivergenceKind::InclusiveKl => {
                let ent = if pi > 0.0 { pi * (pf / mf).ln() } else { 0.0 };
                ent - pi + mu
            }
            DivergenceKind::Chi2 => (mu - pi) * (mu - pi) / pf,
            DivergenceKind::Hellinger => {
                let d = mu.sqrt() - pi.sqrt();
                4.0 * d * d
            }
        }
    }

    fn variation(&self, mu: f64, pi: f64) -> f64 {
        let (mf, pf) = (floored(mu), floored(pi));
        match self {
            DivergenceKind::Kl => (mf / pf).ln(),
            DivergenceKind::InclusiveKl => 1.0 - pf / mf,
            DivergenceKind::Chi2 => 2.0 * (mu / pf - 1.0),
            DivergenceKind::Hellinger => 4.0 * (1.0 - (pf / mf).sqrt()),
        }
    }
}

/// Closed-form 1-D densities used for targets and initial conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum AnalyticDensity {
    Gaussian {
        mean: f64,
        std: f64,
        #[serde(default = "unit")]
        mass: f64,
    },
    Uniform {
        left: f64,
        right: f64,
        #[serde(default = "unit")]
        mass: f64,
    },
    Mixture {
        components: Vec<MixtureComponent>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub density: AnalyticDensity,
}

fn unit() -> f64 {
    1.0
}

impl AnalyticDensity {
    pub fn validate(&self) -> Result<()> {
        match self {
            AnalyticDensity::Gaussian { mean, std, mass } => {
                if !(mean.is_finite() && *std > 0.0 && std.is_finite() && *mass >= 0.0 && mass.is_finite()) {
                    return Err(Error::InvalidArgument(
                        "gaussian needs finite mean, std > 0, mass >= 0".into(),
                    ));
                }
            }
            AnalyticDensity::Uniform { left, right, mass } => {
                if !(left.is_finite() && right.is_finite() && right > left && *mass >= 0.0 && mass.is_finite()) {
                    return Err(Error::InvalidArgument(
                        "uniform needs left < right and mass >= 0".into(),
                    ));
                }
            }
            AnalyticDensity::Mixture { components } => {
                if components.is_empty() {
                    return Err(Error::InvalidArgument("mixture needs at least one component".into()));
                }
                for c in components {
                    if !(c.weight >= 0.0 && c.weight.is_finite()) {
                        return Err(Error::InvalidArgument("mixture weights must be non-negative".into()));
                    }
                    c.density.validate()?;
                }
            }
        }
        Ok(())
    }

    pub fn total_mass(&self) -> f64 {
        match self {
            AnalyticDensity::Gaussian { mass, .. } | AnalyticDensity::Uniform { mass, .. } => *mass,
            AnalyticDensity::Mixture { components } => {
                components.iter().map(|c| c.weight * c.density.total_mass()).sum()
            }
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        match self {
            AnalyticDensity::Gaussian { mean, std, mass } => {
                let z = (x - mean) / std;
                mass * (-0.5 * z * z).exp() / (std * (2.0 * std::f64::consts::PI).sqrt())
            }
            AnalyticDensity::Uniform { left, right, mass } => {
                if (*left..=*right).contains(&x) {
                    mass / (right - left)
                } else {
                    0.0
                }
            }
            AnalyticDensity::Mixture { components } => components.iter().map(|c| c.weight * c.density.pdf(x)).sum(),
        }
    }

    /// `d/dx log p(x)`, available for gaussians and gaussian mixtures.
    pub fn score(&self, x: f64) -> Result<f64> {
        match self {
            AnalyticDensity::Gaussian { mean, std, .. } => Ok(-(x - mean) / (std * std)),
            AnalyticDensity::Uniform { .. } => Err(Error::Incompatible("uniform density has no score".into())),
            AnalyticDensity::Mixture { components } => {
                let mut num = 0.0;
                let mut den = 0.0;
                for c in components {
                    let p = c.weight * c.density.pdf(x);
                    num += p * c.density.score(x)?;
                    den += p;
                }
                if den > 0.0 {
                    Ok(num / den)
                } else {
                    Err(Error::Incompatible("mixture density vanishes; score undefined".into()))
                }
            }
        }
    }

    pub fn render(&self, grid: &Grid) -> Result<GridMeasure> {
        self.validate()?;
        GridMeasure::from_fn(*grid, |x| self.pdf(x))
    }
}

/// External potential `V`; enters energies as `int V dmu`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Potential {
    Constant {
        value: f64,
    },
    /// `V(x) = stiffness / 2 * |x - center|^2`.
    Quadratic {
        center: Vec<f64>,
        stiffness: f64,
    },
    /// Nodal values; only usable on the grid it was sampled on.
    #[serde(skip)]
    Sampled(GridFunction),
}

impl Potential {
    pub fn value_at(&self, x: &[f64]) -> Result<f64> {
        match self {
            Potential::Constant { value } => Ok(*value),
            Potential::Quadratic { center, stiffness } => {
                if center.len() != x.len() {
                    return Err(Error::DimensionMismatch {
                        expected: center.len(),
                        got: x.len(),
                    });
                }
                Ok(0.5 * stiffness * x.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum::<f64>())
            }
            Potential::Sampled(_) => Err(Error::Incompatible("sampled potential has no pointwise values".into())),
        }
    }

    pub fn gradient_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Potential::Constant { .. } => Ok(vec![0.0; x.len()]),
            Potential::Quadratic { center, stiffness } => {
                if center.len() != x.len() {
                    return Err(Error::DimensionMismatch {
                        expected: center.len(),
                        got: x.len(),
                    });
                }
                Ok(x.iter().zip(center).map(|(a, c)| stiffness * (a - c)).collect())
            }
            Potential::Sampled(_) => Err(Error::Incompatible(
                "sampled potential has no pointwise gradient".into(),
            )),
        }
    }

    /// Values and spatial gradient on a grid.
    pub fn on_grid(&self, grid: &Grid) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            Potential::Sampled(f) => {
                if f.grid() != grid {
                    return Err(Error::IncompatibleGrids);
                }
                Ok((f.values().to_vec(), grid.gradient(f.values())))
            }
            _ => {
                let nodes = grid.nodes();
                let v = nodes.iter().map(|&x| self.value_at(&[x])).collect::<Result<Vec<_>>>()?;
                let g = nodes
                    .iter()
                    .map(|&x| self.gradient_at(&[x]).map(|g| g[0]))
                    .collect::<Result<Vec<_>>>()?;
                Ok((v, g))
            }
        }
    }
}

/// Target measure of a divergence.
#[derive(Debug, Clone, PartialEq)]
pub enum Reference {
    Density(GridMeasure),
    Analytic(AnalyticDensity),
    /// Unnormalized Gibbs density `exp(-V)`.
    Gibbs(Potential),
}

impl Reference {
    pub fn density_on(&self, grid: &Grid) -> Result<GridMeasure> {
        match self {
            Reference::Density(m) => {
                if m.grid() != grid {
                    return Err(Error::IncompatibleGrids);
                }
                Ok(m.clone())
            }
            Reference::Analytic(a) => a.render(grid),
            Reference::Gibbs(p) => {
                let (v, _) = p.on_grid(grid)?;
                GridMeasure::new(*grid, v.iter().map(|x| (-x).exp()).collect())
            }
        }
    }

    /// `grad log pi(x)`.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Reference::Density(_) => Err(Error::Incompatible("tabulated target has no pointwise score".into())),
            Reference::Analytic(a) => {
                if x.len() != 1 {
                    return Err(Error::DimensionMismatch {
                        expected: 1,
                        got: x.len(),
                    });
                }
                Ok(vec![a.score(x[0])?])
            }
            Reference::Gibbs(p) => Ok(p.gradient_at(x)?.into_iter().map(|g| -g).collect()),
        }
    }
}

/// Energy functional `F(mu)`.
#[derive(Debug, Clone, PartialEq)]
pub enum EnergySpec {
    PhiDivergence {
        kind: DivergenceKind,
        target: Reference,
    },
    Potential(Potential),
    /// `1/2 MMD^2(mu, target)`.
    Mmd {
        target: Measure,
        kernel: KernelSpec,
    },
    Combination(Vec<(f64, EnergySpec)>),
}

/// First variation `delta F / delta mu` at the nodes (or particles), with its
/// spatial gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstVariation {
    pub values: Vec<f64>,
    /// Per node (grid: length-1 vectors) or per particle.
    pub gradient: Vec<Vec<f64>>,
}

impl FirstVariation {
    /// Gradient of a grid variation as a flat vector.
    pub fn gradient_1d(&self) -> Vec<f64> {
        self.gradient.iter().map(|g| g[0]).collect()
    }
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::EnergyOverflow)
    }
}

impl EnergySpec {
    pub fn divergence(kind: DivergenceKind, target: GridMeasure) -> Self {
        EnergySpec::PhiDivergence {
            kind,
            target: Reference::Density(target),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EnergySpec::Mmd { kernel, .. } => kernel.validate(),
            EnergySpec::Combination(terms) => {
                for (c, e) in terms {
                    if !c.is_finite() {
                        return Err(Error::InvalidArgument("combination coefficients must be finite".into()));
                    }
                    e.validate()?;
                }
                Ok(())
            }
            EnergySpec::PhiDivergence {
                target: Reference::Analytic(a),
                ..
            } => a.validate(),
            _ => Ok(()),
        }
    }

    /// Energy of a grid measure.
    pub fn value(&self, mu: &GridMeasure) -> Result<f64> {
        let grid = mu.grid();
        let v = match self {
            EnergySpec::PhiDivergence { kind, target } => {
                let pi = target.density_on(grid)?;
                let w = grid.weights();
                mu.density()
                    .iter()
                    .zip(pi.density())
                    .zip(&w)
                    .map(|((&m, &p), w)| w * kind.density_term(m, p))
                    .sum()
            }
            EnergySpec::Potential(p) => {
                let (v, _) = p.on_grid(grid)?;
                v.iter().zip(mu.node_weights()).map(|(v, q)| v * q).sum()
            }
            EnergySpec::Mmd { target, kernel } => 0.5 * mmd2_atoms(kernel, &mu.atoms().difference(&target.atoms()))?,
            EnergySpec::Combination(terms) => {
                let mut s = 0.0;
                for (c, e) in terms {
                    s += c * e.value(mu)?;
                }
                s
            }
        };
        finite(v)
    }

    pub fn first_variation(&self, mu: &GridMeasure) -> Result<FirstVariation> {
        let grid = mu.grid();
        let (values, grad) = self.variation_grid(mu)?;
        let grad = match grad {
            Some(g) => g,
            None => grid.gradient(&values),
        };
        if values.iter().chain(&grad).any(|v| !v.is_finite()) {
            return Err(Error::EnergyOverflow);
        }
        Ok(FirstVariation {
            values,
            gradient: grad.into_iter().map(|g| vec![g]).collect(),
        })
    }

    /// Nodal variation plus an analytic gradient when every term has one.
    fn variation_grid(&self, mu: &GridMeasure) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let grid = mu.grid();
        match self {
            EnergySpec::PhiDivergence { kind, target } => {
                let pi = target.density_on(grid)?;
                let v = mu
                    .density()
                    .iter()
                    .zip(pi.density())
                    .map(|(&m, &p)| kind.variation(m, p))
                    .collect();
                Ok((v, None))
            }
            EnergySpec::Potential(p) => {
                let (v, g) = p.on_grid(grid)?;
                let analytic = !matches!(p, Potential::Sampled(_));
                Ok((v, analytic.then_some(g)))
            }
            EnergySpec::Mmd { target, kernel } => {
                let diff = mu.atoms().difference(&target.atoms());
                Ok((kernel_mean_embedding(kernel, &diff, &grid.points())?, None))
            }
            EnergySpec::Combination(terms) => {
                let n = grid.len();
                let mut v = vec![0.0; n];
                let mut g = vec![0.0; n];
                for (c, e) in terms {
                    let (tv, tg) = e.variation_grid(mu)?;
                    let tg = match tg {
                        Some(tg) => tg,
                        None => grid.gradient(&tv),
                    };
                    for i in 0..n {
                        v[i] += c * tv[i];
                    }
                    for i in 0..n {
                        g[i] += c * tg[i];
                    }
                }
                Ok((v, Some(g)))
            }
        }
    }

    /// Energy of a particle measure; divergences need a density and are rejected.
    pub fn value_particles(&self, p: &ParticleMeasure) -> Result<f64> {
        let v = match self {
            EnergySpec::PhiDivergence { .. } => {
                return Err(Error::Incompatible(
                    "divergence energies are undefined for particle measures".into(),
                ))
            }
            EnergySpec::Potential(pot) => {
                let mut s = 0.0;
                for (x, w) in p.positions().iter().zip(p.weights()) {
                    s += w * pot.value_at(x)?;
                }
                s
            }
            EnergySpec::Mmd { target, kernel } => 0.5 * mmd2_atoms(kernel, &p.atoms().difference(&target.atoms()))?,
            EnergySpec::Combination(terms) => {
                let mut s = 0.0;
                for (c, e) in terms {
                    s += c * e.value_particles(p)?;
                }
                s
            }
        };
        finite(v)
    }

    /// Variation and gradient at each particle. Divergence terms are skipped
    /// here; transport geometries handle KL terms through the score of the
    /// target (see [`EnergySpec::kl_terms`]).
    pub fn first_variation_particles(&self, p: &ParticleMeasure) -> Result<FirstVariation> {
        let n = p.len();
        let d = p.dim();
        let mut values = vec![0.0; n];
        let mut gradient = vec![vec![0.0; d]; n];
        self.accumulate_particles(p, 1.0, &mut values, &mut gradient)?;
        Ok(FirstVariation { values, gradient })
    }

    fn accumulate_particles(
        &self,
        p: &ParticleMeasure,
        coef: f64,
        values: &mut [f64],
        gradient: &mut [Vec<f64>],
    ) -> Result<()> {
        match self {
            EnergySpec::PhiDivergence { .. } => Ok(()),
            EnergySpec::Potential(pot) => {
                for (i, x) in p.positions().iter().enumerate() {
                    values[i] += coef * pot.value_at(x)?;
                    for (g, dv) in gradient[i].iter_mut().zip(pot.gradient_at(x)?) {
                        *g += coef * dv;
                    }
                }
                Ok(())
            }
            EnergySpec::Mmd { target, kernel } => {
                let diff = p.atoms().difference(&target.atoms());
                for (i, x) in p.positions().iter().enumerate() {
                    for (y, w) in diff.points.iter().zip(&diff.weights) {
                        values[i] += coef * w * kernel.eval(x, y)?;
                        // Laplace kernels: the symmetric subgradient 0 at coincident points.
                        match kernel.grad_x(x, y) {
                            Ok(g) => {
                                for (a, b) in gradient[i].iter_mut().zip(g) {
                                    *a += coef * w * b;
                                }
                            }
                            Err(Error::NotDifferentiable) => {}
                            Err(e) => return Err(e),
                        }
                    }
                }
                Ok(())
            }
            EnergySpec::Combination(terms) => {
                for (c, e) in terms {
                    e.accumulate_particles(p, coef * c, values, gradient)?;
                }
                Ok(())
            }
        }
    }

    /// Coefficient-weighted KL terms `(c, target)` of this energy; other
    /// divergence kinds on particles are rejected.
    pub fn kl_terms(&self) -> Result<Vec<(f64, &Reference)>> {
        let mut out = Vec::new();
        self.collect_kl(1.0, &mut out)?;
        Ok(out)
    }

    fn collect_kl<'a>(&'a self, coef: f64, out: &mut Vec<(f64, &'a Reference)>) -> Result<()> {
        match self {
            EnergySpec::PhiDivergence {
                kind: DivergenceKind::Kl,
                target,
            } => {
                out.push((coef, target));
                Ok(())
            }
            EnergySpec::PhiDivergence { kind, .. } => Err(Error::Incompatible(format!(
                "{} energy needs a density; particle flows support kl only",
                kind.name()
            ))),
            EnergySpec::Combination(terms) => {
                for (c, e) in terms {
                    e.collect_kl(coef * c, out)?;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// True when the energy contains a divergence term.
    pub fn has_divergence(&self) -> bool {
        match self {
            EnergySpec::PhiDivergence { .. } => true,
            EnergySpec::Combination(t) => t.iter().any(|(_, e)| e.has_divergence()),
            _ => false,
        }
    }
}

/// Central finite difference of `F` along `v` against `int (delta F/delta mu) dv`.
pub fn directional_check(e: &EnergySpec, mu: &GridMeasure, v: &[f64], eps: f64) -> Result<(f64, f64)> {
    let grid = *mu.grid();
    if v.len() != grid.len() {
        return Err(Error::DimensionMismatch {
            expected: grid.len(),
            got: v.len(),
        });
    }
    if v.iter().all(|&x| x == 0.0) {
        return Ok((0.0, 0.0));
    }
    let shifted = |s: f64| GridMeasure::new(grid, mu.density().iter().zip(v).map(|(m, d)| m + s * d).collect());
    let plus = shifted(eps)?;
    let minus = shifted(-eps)?;
    let lhs = (e.value(&plus)? - e.value(&minus)?) / (2.0 * eps);
    let xi = e.first_variation(mu)?;
    let rhs = xi
        .values
        .iter()
        .zip(v)
        .zip(grid.weights())
        .map(|((x, d), w)| x * d * w)
        .sum();
    Ok((lhs, rhs))
}
