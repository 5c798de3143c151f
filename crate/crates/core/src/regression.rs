//! Kernel ridge regression, Nadaraya-Watson smoothing and implicit score matching.
//!
//! The ridge `lambda` is absolute: it is not rescaled by the mass of the
//! weighting measure.

use crate::error::{Error, Result};
use crate::kernels::{KernelSpec, WeightedOperator};
use crate::measures::{floored, GridFunction, GridMeasure, Measure};

/// `inf_g ||g - xi||^2_{L2_rho} + lambda ||g||^2_H` on the nodes of `rho`.
#[derive(Debug, Clone)]
pub struct KRRProblem {
    pub kernel: KernelSpec,
    pub measure: Measure,
    /// Target components; each has one entry per node or particle.
    pub target: Vec<Vec<f64>>,
    pub ridge: f64,
}

impl KRRProblem {
    pub fn scalar(kernel: KernelSpec, measure: impl Into<Measure>, xi: Vec<f64>, ridge: f64) -> Result<Self> {
        let p = Self {
            kernel,
            measure: measure.into(),
            target: vec![xi],
            ridge,
        };
        p.validate()?;
        Ok(p)
    }

    /// Vector-valued target given per point (`xi[i]` is the vector at point `i`).
    pub fn vector(kernel: KernelSpec, measure: impl Into<Measure>, xi: &[Vec<f64>], ridge: f64) -> Result<Self> {
        let d = xi.first().map_or(0, Vec::len);
        if xi.iter().any(|v| v.len() != d) {
            return Err(Error::InvalidArgument("target vectors differ in length".into()));
        }
        let target = (0..d).map(|c| xi.iter().map(|v| v[c]).collect()).collect();
        let p = Self {
            kernel,
            measure: measure.into(),
            target,
            ridge,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if !(self.ridge > 0.0) || !self.ridge.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "ridge must be positive, got {}",
                self.ridge
            )));
        }
        let n = self.measure.atoms().weights.len();
        for c in &self.target {
            if c.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: c.len(),
                });
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("target must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn operator(&self) -> Result<WeightedOperator> {
        WeightedOperator::from_atoms(&self.kernel, &self.measure.atoms())
    }
}

/// `g = (K_rho + lambda I)^{-1} K_rho xi`, componentwise.
pub fn krr_fit(p: &KRRProblem) -> Result<Vec<Vec<f64>>> {
    p.validate()?;
    let op = p.operator()?;
    krr_fit_with(&op, p.ridge, &p.target)
}

/// [`krr_fit`] against a prebuilt operator.
pub fn krr_fit_with(op: &WeightedOperator, ridge: f64, target: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    target
        .iter()
        .map(|xi| {
            let rhs = op.apply(xi)?;
            op.solve_regularized(ridge, &rhs)
        })
        .collect()
}

/// Scalar fit as a grid function (the measure must be a grid measure).
pub fn krr_fit_grid(k: &KernelSpec, mu: &GridMeasure, xi: &GridFunction, ridge: f64) -> Result<GridFunction> {
    if xi.grid() != mu.grid() {
        return Err(Error::IncompatibleGrids);
    }
    let p = KRRProblem::scalar(*k, mu.clone(), xi.values().to_vec(), ridge)?;
    let mut g = krr_fit(&p)?;
    GridFunction::new(*mu.grid(), g.remove(0))
}

/// Out-of-sample value of a fitted component: `g(x) = sum_j k(x, x_j) q_j (xi_j - g_j) / lambda`.
/// Reproduces the fit at the nodes.
pub fn krr_extend(p: &KRRProblem, fit: &[f64], component: usize, x: &[f64]) -> Result<f64> {
    let atoms = p.measure.atoms();
    let xi = p
        .target
        .get(component)
        .ok_or(Error::InvalidArgument(format!("no component {component}")))?;
    let mut s = 0.0;
    for (j, (pt, q)) in atoms.points.iter().zip(&atoms.weights).enumerate() {
        if *q != 0.0 {
            s += p.kernel.eval(x, pt)? * q * (xi[j] - fit[j]);
        }
    }
    Ok(s / p.ridge)
}

fn q_norm2(a: &[f64], q: &[f64]) -> f64 {
    a.iter().zip(q).map(|(x, w)| w * x * x).sum()
}

/// `<f - xi, K_rho (f - xi)>_{L2_rho} + lambda ||f||^2_{L2_rho}`, summed over components.
pub fn krr_alternative_objective(p: &KRRProblem, f: &[Vec<f64>]) -> Result<f64> {
    let op = p.operator()?;
    let q = op.weights().to_vec();
    if f.len() != p.target.len() {
        return Err(Error::DimensionMismatch {
            expected: p.target.len(),
            got: f.len(),
        });
    }
    let mut total = 0.0;
    for (fc, xi) in f.iter().zip(&p.target) {
        let r: Vec<f64> = fc.iter().zip(xi).map(|(a, b)| a - b).collect();
        let kr = op.apply(&r)?;
        total += r.iter().zip(&kr).zip(&q).map(|((a, b), w)| a * b * w).sum::<f64>();
        total += p.ridge * q_norm2(fc, &q);
    }
    Ok(total)
}

/// `K_rho (f - xi) + lambda f` per component; zero exactly at the KRR solution.
pub fn krr_alternative_gradient(p: &KRRProblem, f: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let op = p.operator()?;
    f.iter()
        .zip(&p.target)
        .map(|(fc, xi)| {
            let r: Vec<f64> = fc.iter().zip(xi).map(|(a, b)| a - b).collect();
            let kr = op.apply(&r)?;
            Ok(kr.iter().zip(fc).map(|(a, b)| a + p.ridge * b).collect())
        })
        .collect()
}

/// `1/2 ||g||^2_{L2_rho} + 1/(2 lambda) ||K^{1/2} (g - xi)||^2_{L2_rho}`.
pub fn infimal_convolution_objective(p: &KRRProblem, g: &[Vec<f64>]) -> Result<f64> {
    Ok(krr_alternative_objective(p, g)? / (2.0 * p.ridge))
}

/// Nadaraya-Watson estimate `sum_i k(x_i, x) y_i / sum_i k(x_i, x)` of a vector field.
pub fn nadaraya_watson(k: &KernelSpec, samples: &[Vec<f64>], targets: &[Vec<f64>], x: &[f64]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptyNeighborhood);
    }
    if samples.len() != targets.len() {
        return Err(Error::DimensionMismatch {
            expected: samples.len(),
            got: targets.len(),
        });
    }
    let d = targets[0].len();
    let mut num = vec![0.0; d];
    let mut den = 0.0;
    for (s, y) in samples.iter().zip(targets) {
        if y.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: y.len(),
            });
        }
        let w = k.eval(s, x)?;
        den += w;
        for (n, v) in num.iter_mut().zip(y) {
            *n += w * v;
        }
    }
    if !(den > 0.0) {
        return Err(Error::EmptyNeighborhood);
    }
    Ok(num.into_iter().map(|n| n / den).collect())
}

pub fn nadaraya_watson_scalar(k: &KernelSpec, samples: &[f64], targets: &[f64], x: f64) -> Result<f64> {
    let s: Vec<Vec<f64>> = samples.iter().map(|&v| vec![v]).collect();
    let t: Vec<Vec<f64>> = targets.iter().map(|&v| vec![v]).collect();
    Ok(nadaraya_watson(k, &s, &t, &[x])?[0])
}

/// Grid score `(d rho / dx) / rho` with the density floor.
pub fn grid_score(m: &GridMeasure) -> Vec<f64> {
    let d = m.grid().gradient(m.density());
    d.iter().zip(m.density()).map(|(g, r)| g / floored(*r)).collect()
}

/// Implicit score matching in two forms (the `f`-independent constant dropped):
/// `direct = ||f||^2_{L2_mu} - 2 <f, grad log(mu/pi)>_{L2_mu}` and
/// `ibp = int (f^2 + 2 f' + 2 f grad log pi) dmu`.
pub fn ism_objective(f: &GridFunction, mu: &GridMeasure, pi: &GridMeasure) -> Result<(f64, f64)> {
    mu.same_grid(pi)?;
    if f.grid() != mu.grid() {
        return Err(Error::IncompatibleGrids);
    }
    let grid = mu.grid();
    let w = grid.weights();
    let fv = f.values();
    let s_mu = grid_score(mu);
    let s_pi = grid_score(pi);
    let df = grid.gradient(fv);
    let mut direct = 0.0;
    let mut ibp = 0.0;
    for i in 0..grid.len() {
        let q = w[i] * mu.density()[i];
        direct += q * (fv[i] * fv[i] - 2.0 * fv[i] * (s_mu[i] - s_pi[i]));
        ibp += q * (fv[i] * fv[i] + 2.0 * df[i] + 2.0 * fv[i] * s_pi[i]);
    }
    Ok((direct, ibp))
}
