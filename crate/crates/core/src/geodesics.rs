//! Closed-form Fisher-Rao and MMD geodesics and the dynamic (action) cost of
//! discrete paths.

use crate::error::{Error, Result};
use crate::measures::{GridFunction, GridMeasure, DENSITY_FLOOR};

fn check_s(s: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::InvalidArgument(format!(
            "geodesic parameter must lie in [0, 1], got {s}"
        )));
    }
    Ok(())
}

/// `omega(s) = ((1 - s) sqrt(mu0) + s sqrt(mu1))^2`.
pub fn fr_geodesic(mu0: &GridMeasure, mu1: &GridMeasure, s: f64) -> Result<GridMeasure> {
    mu0.same_grid(mu1)?;
    check_s(s)?;
    if s == 0.0 {
        return Ok(mu0.clone());
    }
    if s == 1.0 {
        return Ok(mu1.clone());
    }
    let rho = mu0
        .density()
        .iter()
        .zip(mu1.density())
        .map(|(a, b)| {
            let r = (1.0 - s) * a.sqrt() + s * b.sqrt();
            r * r
        })
        .collect();
    GridMeasure::new(*mu0.grid(), rho)
}

/// `(1 - t) mu0 + t mu1`, clipped at zero for `t` outside `[0, 1]`.
/// Returns the measure and the number of clipped nodes.
pub fn mmd_geodesic(mu0: &GridMeasure, mu1: &GridMeasure, t: f64) -> Result<(GridMeasure, usize)> {
    mu0.same_grid(mu1)?;
    if !t.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "path parameter must be finite, got {t}"
        )));
    }
    let mut clipped = 0;
    let rho = mu0
        .density()
        .iter()
        .zip(mu1.density())
        .map(|(a, b)| {
            let v = (1.0 - t) * a + t * b;
            if v < 0.0 {
                clipped += 1;
                0.0
            } else {
                v
            }
        })
        .collect();
    Ok((GridMeasure::new(*mu0.grid(), rho)?, clipped))
}

/// `int_0^T ||xi_t||^2_{L2_mu_t} dt` with `xi_t = -mu_dot / mu` (floored),
/// time derivatives by central differences (one-sided at both ends) and the
/// trapezoid rule in time.
pub fn fr_dynamic_cost(path: &[GridMeasure], times: &[f64]) -> Result<f64> {
    let n = path.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 path points, got {n}")));
    }
    if times.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: times.len(),
        });
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument("times must be strictly increasing".into()));
    }
    for m in &path[1..] {
        path[0].same_grid(m)?;
    }
    let w = path[0].grid().weights();
    let mut cost = 0.0;
    for k in 0..n {
        let (lo, hi) = match k {
            0 => (0, 1),
            k if k == n - 1 => (n - 2, n - 1),
            k => (k - 1, k + 1),
        };
        let dt = times[hi] - times[lo];
        let rho = path[k].density();
        let mut action = 0.0;
        for i in 0..rho.len() {
            let rate = (path[hi].density()[i] - path[lo].density()[i]) / dt;
            if rho[i] <= 0.0 {
                if rate != 0.0 && k != 0 && k != n - 1 {
                    return Err(Error::DisjointPath);
                }
                continue;
            }
            let xi = -rate / rho[i].max(DENSITY_FLOOR);
            action += w[i] * xi * xi * rho[i];
        }
        let weight = match k {
            0 => 0.5 * (times[1] - times[0]),
            k if k == n - 1 => 0.5 * (times[n - 1] - times[n - 2]),
            k => 0.5 * (times[k + 1] - times[k - 1]),
        };
        cost += weight * action;
    }
    Ok(cost)
}

/// Explicit geodesic in Hamiltonian form and its finite-difference residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianCheck {
    pub xi: GridFunction,
    pub mu: GridMeasure,
    /// `max |mu_dot - mu xi|` by central differences in `s`.
    pub residual_mu: f64,
    /// `max |xi_dot + xi^2 / 2|` by central differences in `s`.
    pub residual_xi: f64,
}

fn explicit_state(xi0: &[f64], mu0: &[f64], s: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut xi = Vec::with_capacity(xi0.len());
    let mut mu = Vec::with_capacity(xi0.len());
    for (x, m) in xi0.iter().zip(mu0) {
        let a = 1.0 + s * x / 2.0;
        if !(a > 0.0) {
            return Err(Error::PoleCrossing);
        }
        xi.push(x / a);
        mu.push(a * a * m);
    }
    Ok((xi, mu))
}

/// `xi(s) = xi0 / (1 + s xi0 / 2)`, `mu(s) = (1 + s xi0 / 2)^2 mu0`, with the
/// residuals of `mu_dot = mu xi`, `xi_dot = -xi^2 / 2` at step `ds`.
pub fn fr_hamiltonian_check(xi0: &GridFunction, mu0: &GridMeasure, s: f64, ds: f64) -> Result<HamiltonianCheck> {
    if xi0.grid() != mu0.grid() {
        return Err(Error::IncompatibleGrids);
    }
    if !(ds > 0.0) {
        return Err(Error::InvalidArgument(format!("ds must be positive, got {ds}")));
    }
    let (xi, mu) = explicit_state(xi0.values(), mu0.density(), s)?;
    let (xp, mp) = explicit_state(xi0.values(), mu0.density(), s + ds)?;
    let (xm, mm) = explicit_state(xi0.values(), mu0.density(), s - ds)?;
    let mut residual_mu = 0.0f64;
    let mut residual_xi = 0.0f64;
    for i in 0..xi.len() {
        let dmu = (mp[i] - mm[i]) / (2.0 * ds);
        let dxi = (xp[i] - xm[i]) / (2.0 * ds);
        residual_mu = residual_mu.max((dmu - mu[i] * xi[i]).abs());
        residual_xi = residual_xi.max((dxi + 0.5 * xi[i] * xi[i]).abs());
    }
    Ok(HamiltonianCheck {
        xi: GridFunction::new(*mu0.grid(), xi)?,
        mu: GridMeasure::new(*mu0.grid(), mu)?,
        residual_mu,
        residual_xi,
    })
}
