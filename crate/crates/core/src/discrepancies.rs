//! Static distances, divergences and dissipation functionals.
//!
//! The RKHS-gradient duals (`de_stein2`, `d_wfr2`, `ksf2`) are evaluated with
//! the representer ansatz `zeta = sum_i alpha_i k(c_i, .)` over a finite
//! center set, which turns each supremum into
//! `sup_alpha alpha^T m - 1/4 alpha^T Q alpha = m^T Q^{-1} m`. Without a
//! representer theorem for the `||grad zeta||_H` penalty the result is a lower
//! bound of the true supremum that grows as centers are added.

use nalgebra::{DMatrix, DVector};

use crate::energies::{DivergenceKind, EnergySpec, Reference};
use crate::error::{Error, Result};
use crate::kernels::{gram, kernel_mean_embedding, KernelSpec, JITTER_SCALE};
use crate::measures::{floored, Atoms, GridMeasure, Measure};

/// `sup_alpha alpha^T m - 1/4 alpha^T Q alpha` for a symmetric PSD `Q`.
#[derive(Debug, Clone)]
pub struct DualQuadratic {
    pub moments: Vec<f64>,
    pub form: DMatrix<f64>,
}

/// Value of a [`DualQuadratic`] and how it was obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualSolution {
    pub value: f64,
    /// Absolute diagonal jitter that was added to `Q`.
    pub jitter: f64,
    /// Set when the base jitter was not enough and had to be increased.
    pub escalated: bool,
}

impl DualQuadratic {
    pub fn new(moments: Vec<f64>, form: DMatrix<f64>) -> Result<Self> {
        if form.nrows() != moments.len() || form.ncols() != moments.len() {
            return Err(Error::DimensionMismatch {
                expected: moments.len(),
                got: form.nrows(),
            });
        }
        Ok(Self { moments, form })
    }

    /// Objective at a given coefficient vector (any feasible point is a lower bound).
    pub fn objective(&self, alpha: &[f64]) -> f64 {
        let a = DVector::from_column_slice(alpha);
        let m = DVector::from_column_slice(&self.moments);
        a.dot(&m) - 0.25 * a.dot(&(&self.form * &a))
    }

    /// Maximizer `alpha* = 2 Q^{-1} m` and the optimal value `m^T Q^{-1} m`.
    pub fn solve(&self) -> Result<(Vec<f64>, DualSolution)> {
        let n = self.moments.len();
        if n == 0 {
            return Ok((
                vec![],
                DualSolution {
                    value: 0.0,
                    jitter: 0.0,
                    escalated: false,
                },
            ));
        }
        let m = DVector::from_column_slice(&self.moments);
        if m.iter().all(|&x| x == 0.0) {
            return Ok((
                vec![0.0; n],
                DualSolution {
                    value: 0.0,
                    jitter: 0.0,
                    escalated: false,
                },
            ));
        }
        let scale = (self.form.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
        let mut jitter = JITTER_SCALE * scale;
        for attempt in 0..5 {
            let mut q = self.form.clone();
            for i in 0..n {
                q[(i, i)] += jitter;
            }
            if let Some(chol) = q.cholesky() {
                let x = chol.solve(&m);
                let value = m.dot(&x);
                if value.is_finite() {
                    let alpha = x.iter().map(|v| 2.0 * v).collect();
                    return Ok((
                        alpha,
                        DualSolution {
                            value,
                            jitter,
                            escalated: attempt > 0,
                        },
                    ));
                }
            }
            jitter *= 100.0;
        }
        Err(Error::SingularOperator)
    }
}

/// `sum_ij d_i d_j k(x_i, x_j)` for signed atoms.
pub fn mmd2_atoms(k: &KernelSpec, diff: &Atoms) -> Result<f64> {
    let active: Vec<usize> = (0..diff.weights.len()).filter(|&i| diff.weights[i] != 0.0).collect();
    let mut total = 0.0;
    for &i in &active {
        let mut row = 0.0;
        for &j in &active {
            row += diff.weights[j] * k.eval(&diff.points[i], &diff.points[j])?;
        }
        total += diff.weights[i] * row;
    }
    Ok(total)
}

/// Squared MMD `int int k d(mu - nu) d(mu - nu)`.
pub fn mmd2(k: &KernelSpec, mu: &Measure, nu: &Measure) -> Result<f64> {
    mmd2_atoms(k, &mu.atoms().difference(&nu.atoms()))
}

/// Unconstrained dual `sup_h <h, mu - nu> - 1/4 ||h||_H^2` over
/// `h = sum_i alpha_i k(x_i, .)` on the joint support.
pub fn mmd_dual(k: &KernelSpec, mu: &Measure, nu: &Measure) -> Result<(DualQuadratic, DualSolution)> {
    let diff = mu.atoms().difference(&nu.atoms());
    let g = gram(k, &diff.points)?;
    let d = DVector::from_column_slice(&diff.weights);
    let moments = (&g * d).iter().copied().collect();
    let dq = DualQuadratic::new(moments, g)?;
    let (_, sol) = dq.solve()?;
    Ok((dq, sol))
}

pub fn mmd_dual_value(k: &KernelSpec, mu: &Measure, nu: &Measure) -> Result<f64> {
    Ok(mmd_dual(k, mu, nu)?.1.value)
}

/// `4 int (sqrt mu - sqrt nu)^2`.
pub fn fisher_rao2(mu: &GridMeasure, nu: &GridMeasure) -> Result<f64> {
    mu.same_grid(nu)?;
    Ok(4.0
        * mu.density()
            .iter()
            .zip(nu.density())
            .zip(mu.grid().weights())
            .map(|((a, b), w)| {
                let d = a.sqrt() - b.sqrt();
                w * d * d
            })
            .sum::<f64>())
}

/// `D_chi2(mu | nu) = int (dmu/dnu - 1)^2 dnu`; swap the arguments for the reverse divergence.
pub fn chi2_divergence(mu: &GridMeasure, nu: &GridMeasure) -> Result<f64> {
    flattened_fr2(mu, nu, nu)
}

/// Flattened Fisher-Rao distance with reference `omega`: `int (mu - nu)^2 / omega`.
pub fn flattened_fr2(mu: &GridMeasure, nu: &GridMeasure, omega: &GridMeasure) -> Result<f64> {
    mu.same_grid(nu)?;
    mu.same_grid(omega)?;
    Ok(mu
        .density()
        .iter()
        .zip(nu.density())
        .zip(omega.density())
        .zip(mu.grid().weights())
        .map(|(((a, b), o), w)| w * (a - b) * (a - b) / floored(*o))
        .sum())
}

/// `int int xi(x) k(x, y) xi(y) dmu dmu` with `xi = delta F / delta mu`:
/// the energy dissipation rate of the kernelized Fisher-Rao flow.
pub fn frk_dissipation(e: &EnergySpec, mu: &GridMeasure, k: &KernelSpec) -> Result<f64> {
    let xi = e.first_variation(mu)?;
    let weights = xi.values.iter().zip(mu.node_weights()).map(|(x, q)| x * q).collect();
    mmd2_atoms(
        k,
        &Atoms {
            points: mu.grid().points(),
            weights,
        },
    )
}

/// `int int grad xi(x) k(x, y) grad xi(y) dmu dmu`: the dissipation rate of
/// the Stein flow (the squared KSD when `e` is KL).
pub fn stein_dissipation(e: &EnergySpec, mu: &GridMeasure, k: &KernelSpec) -> Result<f64> {
    let xi = e.first_variation(mu)?;
    let weights = xi
        .gradient_1d()
        .iter()
        .zip(mu.node_weights())
        .map(|(g, q)| g * q)
        .collect();
    mmd2_atoms(
        k,
        &Atoms {
            points: mu.grid().points(),
            weights,
        },
    )
}

/// Squared kernel Stein discrepancy of `mu` against `pi` on the grid.
pub fn ksd2(mu: &GridMeasure, pi: &GridMeasure, k: &KernelSpec) -> Result<f64> {
    stein_dissipation(&EnergySpec::divergence(DivergenceKind::Kl, pi.clone()), mu, k)
}

/// Same as [`ksd2`] with an arbitrary reference.
pub fn ksd2_reference(mu: &GridMeasure, target: Reference, k: &KernelSpec) -> Result<f64> {
    stein_dissipation(
        &EnergySpec::PhiDivergence {
            kind: DivergenceKind::Kl,
            target,
        },
        mu,
        k,
    )
}

fn moments(k: &KernelSpec, mu: &Measure, nu: &Measure, centers: &[Vec<f64>]) -> Result<Vec<f64>> {
    kernel_mean_embedding(k, &mu.atoms().difference(&nu.atoms()), centers)
}

fn mixed_gram(k: &KernelSpec, centers: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = centers.len();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = k.mixed_second(&centers[i], &centers[j])?;
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    Ok(g)
}

fn check_centers(centers: &[Vec<f64>]) -> Result<()> {
    if centers.is_empty() {
        return Err(Error::InvalidArgument("at least one center is required".into()));
    }
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            if centers[i] == centers[j] {
                return Err(Error::InvalidArgument(format!("centers {i} and {j} coincide")));
            }
        }
    }
    Ok(())
}

/// Default center set: the union of both supports, deduplicated.
pub fn default_centers(mu: &Measure, nu: &Measure) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    for p in mu.atoms().points.into_iter().chain(nu.atoms().points) {
        if !out.contains(&p) {
            out.push(p);
        }
    }
    out
}

/// De-Stein (kernel Sobolev) discrepancy
/// `sup_zeta int zeta d(mu - nu) - 1/4 ||grad zeta||_H^2` on the center span.
pub fn de_stein2(mu: &Measure, nu: &Measure, k: &KernelSpec, centers: &[Vec<f64>]) -> Result<DualSolution> {
    check_centers(centers)?;
    let dq = DualQuadratic::new(moments(k, mu, nu, centers)?, mixed_gram(k, centers)?)?;
    Ok(dq.solve()?.1)
}

/// The MMD dual restricted to the center span, `m^T G^{-1} m`.
pub fn mmd_center_dual(mu: &Measure, nu: &Measure, k: &KernelSpec, centers: &[Vec<f64>]) -> Result<DualSolution> {
    check_centers(centers)?;
    let dq = DualQuadratic::new(moments(k, mu, nu, centers)?, gram(k, centers)?)?;
    Ok(dq.solve()?.1)
}

/// De-kernelized Wasserstein-Fisher-Rao discrepancy
/// `sup_zeta int zeta d(mu - nu) - 1/4 ||grad zeta||_H^2 - 1/4 ||zeta||_H^2`.
pub fn d_wfr2(mu: &Measure, nu: &Measure, k: &KernelSpec, centers: &[Vec<f64>]) -> Result<DualSolution> {
    check_centers(centers)?;
    let q = gram(k, centers)? + mixed_gram(k, centers)?;
    let dq = DualQuadratic::new(moments(k, mu, nu, centers)?, q)?;
    Ok(dq.solve()?.1)
}

/// Regularized kernel Sobolev-Fisher discrepancy
/// `sup_zeta int zeta d(mu - nu) - 1/4 ||grad zeta||^2_{L2_nu} - 1/4 ||zeta||^2_{L2_nu} - a/2 ||zeta||_H^2`.
pub fn ksf2(mu: &Measure, nu: &Measure, k: &KernelSpec, a: f64, centers: &[Vec<f64>]) -> Result<DualSolution> {
    if !(a > 0.0) {
        return Err(Error::InvalidArgument(format!("ksf2 needs a > 0, got {a}")));
    }
    check_centers(centers)?;
    let nu_atoms = nu.atoms();
    let n = centers.len();
    let mut q = gram(k, centers)? * (2.0 * a);
    for (x, w) in nu_atoms.points.iter().zip(&nu_atoms.weights) {
        if *w == 0.0 {
            continue;
        }
        let vals: Vec<f64> = centers.iter().map(|c| k.eval(x, c)).collect::<Result<_>>()?;
        let grads: Vec<Vec<f64>> = centers.iter().map(|c| k.grad_x(x, c)).collect::<Result<_>>()?;
        for i in 0..n {
            for j in 0..n {
                let gg: f64 = grads[i].iter().zip(&grads[j]).map(|(a, b)| a * b).sum();
                q[(i, j)] += w * (vals[i] * vals[j] + gg);
            }
        }
    }
    let dq = DualQuadratic::new(moments(k, mu, nu, centers)?, q)?;
    Ok(dq.solve()?.1)
}

/// `MMD^2 + lambda FR^2`.
pub fn mmd_fr2(mu: &GridMeasure, nu: &GridMeasure, k: &KernelSpec, lambda: f64) -> Result<f64> {
    let m = mmd2(k, &mu.clone().into(), &nu.clone().into())?;
    if lambda == 0.0 {
        return Ok(m);
    }
    Ok(m + lambda * fisher_rao2(mu, nu)?)
}

fn check_equal_mass(mu: &GridMeasure, nu: &GridMeasure) -> Result<()> {
    let (a, b) = (mu.mass(), nu.mass());
    if (a - b).abs() > 1e-10 * a.abs().max(b.abs()).max(1.0) {
        return Err(Error::UnequalMass);
    }
    Ok(())
}

/// Flattened Wasserstein (weighted `H^{-1}`) discrepancy in closed form:
/// `int F^2 / omega` with `F(x) = int_left^x (mu - nu)`.
///
/// `F` is taken at cell midpoints as the running quadrature sum
/// `G_c = sum_{i <= c} w_i (mu - nu)_i`, and `omega` as the cell average, so the
/// value is `sum_c h G_c^2 / omega_c`.
pub fn flat_w2(mu: &GridMeasure, nu: &GridMeasure, omega: &GridMeasure) -> Result<f64> {
    mu.same_grid(nu)?;
    mu.same_grid(omega)?;
    check_equal_mass(mu, nu)?;
    let grid = mu.grid();
    let h = grid.spacing();
    let w = grid.weights();
    let (a, b, om) = (mu.density(), nu.density(), omega.density());
    let mut cum = 0.0;
    let mut total = 0.0;
    for c in 0..grid.len() - 1 {
        cum += w[c] * (a[c] - b[c]);
        total += h * cum * cum / floored(0.5 * (om[c] + om[c + 1]));
    }
    Ok(total)
}

/// The same quantity as [`flat_w2`] from its static dual over nodal test
/// functions, `sup_zeta sum_i zeta_i (mu - nu)_i w_i - 1/4 sum_cells omega |dzeta/dx|^2 h`,
/// with `zeta_0 = 0` fixing the constant.
pub fn flat_w2_dual(mu: &GridMeasure, nu: &GridMeasure, omega: &GridMeasure) -> Result<DualSolution> {
    mu.same_grid(nu)?;
    mu.same_grid(omega)?;
    check_equal_mass(mu, nu)?;
    let grid = mu.grid();
    let n = grid.len();
    let h = grid.spacing();
    let w = grid.weights();
    let moments: Vec<f64> = (1..n).map(|i| w[i] * (mu.density()[i] - nu.density()[i])).collect();
    let om = omega.density();
    let mut q = DMatrix::zeros(n - 1, n - 1);
    // cell c couples nodes c and c+1; unknown index = node - 1
    for c in 0..n - 1 {
        let s = floored(0.5 * (om[c] + om[c + 1])) / h;
        let hi = c; // node c+1
        q[(hi, hi)] += s;
        if c > 0 {
            let lo = c - 1; // node c
            q[(lo, lo)] += s;
            q[(lo, hi)] -= s;
            q[(hi, lo)] -= s;
        }
    }
    let dq = DualQuadratic::new(moments, q)?;
    Ok(dq.solve()?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energies::AnalyticDensity;
    use crate::measures::{Grid, ParticleMeasure};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dirac(x: f64) -> Measure {
        ParticleMeasure::new(vec![vec![x]], vec![1.0]).unwrap().into()
    }

    fn bump(g: Grid, a: f64, s: f64, m: f64) -> GridMeasure {
        AnalyticDensity::Gaussian {
            mean: a,
            std: s,
            mass: m,
        }
        .render(&g)
        .unwrap()
    }

    fn random_measure(rng: &mut ChaCha8Rng, g: Grid) -> GridMeasure {
        let a = rng.gen_range(-1.0..1.0);
        let s = rng.gen_range(0.4..1.2);
        let c = rng.gen_range(0.05..0.3);
        let m = rng.gen_range(0.5..2.0);
        GridMeasure::from_fn(g, |x| m * (-(x - a) * (x - a) / (2.0 * s * s)).exp() + c).unwrap()
    }

    #[test]
    fn mmd2_examples() {
        let k = KernelSpec::gaussian(1.0);
        let v = mmd2(&k, &dirac(0.0), &dirac(1.0)).unwrap();
        assert!((v - 2.0 * (1.0 - (-0.5f64).exp())).abs() < 1e-15);
        assert!((v - 0.786_94).abs() < 1e-5);
        let g = Grid::new(-3.0, 3.0, 61).unwrap();
        let mu: Measure = bump(g, 0.0, 1.0, 1.0).into();
        assert_eq!(mmd2(&k, &mu, &mu).unwrap(), 0.0);
        let nu = bump(g, 0.5, 0.7, 1.3);
        let mu_g = mu.as_grid().unwrap().clone();
        let base = mmd2(&k, &mu, &nu.clone().into()).unwrap();
        let scaled = mmd2(&k, &mu_g.scaled(3.0).into(), &nu.scaled(3.0).into()).unwrap();
        assert!((scaled - 9.0 * base).abs() < 1e-12);
    }

    #[test]
    fn mmd_dual_examples() {
        let k = KernelSpec::gaussian(1.0);
        let (dq, sol) = mmd_dual(&k, &dirac(0.0), &dirac(1.0)).unwrap();
        assert!((sol.value - 0.786_94).abs() < 1e-5);
        assert!((sol.value - mmd2(&k, &dirac(0.0), &dirac(1.0)).unwrap()).abs() < 1e-8);
        assert_eq!(dq.objective(&[0.0, 0.0]), 0.0);
        assert!(dq.objective(&[0.0, 0.0]) <= sol.value);
        let g = Grid::new(0.0, 1.0, 11).unwrap();
        let mu: Measure = bump(g, 0.5, 0.2, 1.0).into();
        assert_eq!(mmd_dual_value(&k, &mu, &mu).unwrap(), 0.0);
    }

    #[test]
    fn fisher_rao_examples() {
        let g = Grid::new(0.0, 1.0, 21).unwrap();
        let one = GridMeasure::new(g, vec![1.0; 21]).unwrap();
        let four = GridMeasure::new(g, vec![4.0; 21]).unwrap();
        assert!((fisher_rao2(&one, &four).unwrap() - 4.0).abs() < 1e-14);
        assert_eq!(fisher_rao2(&one, &one).unwrap(), 0.0);
        let left = GridMeasure::new(g, (0..21).map(|i| if i < 10 { 2.0 } else { 0.0 }).collect()).unwrap();
        let right = GridMeasure::new(g, (0..21).map(|i| if i > 10 { 1.0 } else { 0.0 }).collect()).unwrap();
        let want = 4.0 * (left.mass() + right.mass());
        assert!((fisher_rao2(&left, &right).unwrap() - want).abs() < 1e-14);
        let other = GridMeasure::new(Grid::new(0.0, 2.0, 21).unwrap(), vec![1.0; 21]).unwrap();
        assert_eq!(fisher_rao2(&one, &other), Err(Error::IncompatibleGrids));
    }

    #[test]
    fn chi2_examples() {
        let g = Grid::new(0.0, 1.0, 21).unwrap();
        let nu = GridMeasure::new(g, vec![1.0; 21]).unwrap();
        let mu = nu.scaled(2.0);
        assert_eq!(chi2_divergence(&nu, &nu).unwrap(), 0.0);
        assert!((chi2_divergence(&mu, &nu).unwrap() - 1.0).abs() < 1e-14);
        assert!((chi2_divergence(&nu, &mu).unwrap() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn flattened_fisher_rao_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Grid::new(-3.0, 3.0, 121).unwrap();
        for _ in 0..10 {
            let mu = random_measure(&mut rng, g);
            let nu = random_measure(&mut rng, g);
            assert_eq!(flattened_fr2(&mu, &mu, &nu).unwrap(), 0.0);
            let a = flattened_fr2(&mu, &nu, &nu).unwrap();
            assert!((a - chi2_divergence(&mu, &nu).unwrap()).abs() < 1e-12);
            let b = flattened_fr2(&mu, &nu, &mu).unwrap();
            assert!((b - chi2_divergence(&nu, &mu).unwrap()).abs() < 1e-12);
            let mid = GridMeasure::new(
                g,
                mu.density()
                    .iter()
                    .zip(nu.density())
                    .map(|(a, b)| 0.25 * (a.sqrt() + b.sqrt()).powi(2))
                    .collect(),
            )
            .unwrap();
            let c = flattened_fr2(&mu, &nu, &mid).unwrap();
            assert!((c - fisher_rao2(&mu, &nu).unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn frk_dissipation_of_inclusive_kl_is_mmd2() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Grid::new(-3.0, 3.0, 81).unwrap();
        let k = KernelSpec::gaussian(0.7);
        for _ in 0..5 {
            let mu = random_measure(&mut rng, g);
            let pi = random_measure(&mut rng, g);
            let e = EnergySpec::divergence(DivergenceKind::InclusiveKl, pi.clone());
            let d = frk_dissipation(&e, &mu, &k).unwrap();
            // independent O(n^2) double sum over densities
            let w = g.weights();
            let x = g.nodes();
            let mut oracle = 0.0;
            for i in 0..g.len() {
                for j in 0..g.len() {
                    oracle += w[i]
                        * (mu.density()[i] - pi.density()[i])
                        * (-(x[i] - x[j]).powi(2) / (2.0 * 0.49)).exp()
                        * w[j]
                        * (mu.density()[j] - pi.density()[j]);
                }
            }
            assert!((d - oracle).abs() < 1e-10);
            assert!((d - mmd2(&k, &mu.clone().into(), &pi.clone().into()).unwrap()).abs() < 1e-10);
            let at_target = frk_dissipation(&e, &pi, &k).unwrap();
            assert!(at_target.abs() < 1e-14);
        }
    }

    #[test]
    fn frk_dissipation_chi2_double_sum() {
        let g = Grid::new(0.0, 1.0, 11).unwrap();
        let pi = GridMeasure::from_fn(g, |x| 1.0 + 0.5 * x).unwrap();
        let mu = pi.scaled(2.0);
        let k = KernelSpec::laplace(0.3);
        let e = EnergySpec::divergence(DivergenceKind::Chi2, pi.clone());
        let w = g.weights();
        let x = g.nodes();
        let mut oracle = 0.0;
        for i in 0..11 {
            for j in 0..11 {
                let a = 2.0 * (mu.density()[i] / pi.density()[i] - 1.0) * mu.density()[i] * w[i];
                let b = 2.0 * (mu.density()[j] / pi.density()[j] - 1.0) * mu.density()[j] * w[j];
                oracle += a * b * (-(x[i] - x[j]).abs() / 0.3).exp();
            }
        }
        assert!((frk_dissipation(&e, &mu, &k).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn stein_dissipation_matches_double_quadrature() {
        let g = Grid::new(-6.0, 6.0, 400).unwrap();
        let mu = bump(g, 0.0, 1.0, 1.0);
        let pi = bump(g, 1.0, 1.0, 1.0);
        let k = KernelSpec::gaussian(1.0);
        let v = ksd2(&mu, &pi, &k).unwrap();
        // analytic score difference d/dx log(mu/pi) = (x - 1) - x = -1
        let w = g.weights();
        let x = g.nodes();
        let mut oracle = 0.0;
        for i in 0..g.len() {
            for j in 0..g.len() {
                oracle += w[i] * mu.density()[i] * w[j] * mu.density()[j] * (-(x[i] - x[j]).powi(2) / 2.0).exp();
            }
        }
        assert!((v - oracle).abs() < 1e-6, "{v} vs {oracle}");
        assert!(ksd2(&pi, &pi, &k).unwrap().abs() < 1e-20);
        let k3 = KernelSpec { scale: 3.0, ..k };
        assert!((ksd2(&mu, &pi, &k3).unwrap() - 3.0 * v).abs() < 1e-12);
    }

    #[test]
    fn de_stein_examples() {
        let k = KernelSpec::gaussian(1.0);
        let centers = vec![vec![0.0], vec![1.0]];
        let s = de_stein2(&dirac(0.0), &dirac(1.0), &k, &centers).unwrap();
        let e = (-0.5f64).exp();
        assert!((s.value - 2.0 * (1.0 - e).powi(2)).abs() < 1e-10);
        assert_eq!(de_stein2(&dirac(0.3), &dirac(0.3), &k, &centers).unwrap().value, 0.0);
        assert!(de_stein2(&dirac(0.0), &dirac(1.0), &KernelSpec::laplace(1.0), &centers).is_err());
        assert!(de_stein2(&dirac(0.0), &dirac(1.0), &k, &[vec![0.0], vec![0.0]]).is_err());
    }

    #[test]
    fn de_stein_grows_with_centers() {
        let g = Grid::new(-2.0, 2.0, 41).unwrap();
        let mu: Measure = bump(g, -0.3, 0.5, 1.0).into();
        let nu: Measure = bump(g, 0.4, 0.6, 1.0).into();
        let k = KernelSpec::gaussian(0.8);
        let mut prev = 0.0;
        for m in [2usize, 4, 8, 16] {
            let centers: Vec<Vec<f64>> = (0..m).map(|i| vec![-2.0 + 4.0 * i as f64 / (m - 1) as f64]).collect();
            let v = de_stein2(&mu, &nu, &k, &centers).unwrap().value;
            assert!(v >= prev - 1e-9 * (1.0 + prev), "{m}: {v} < {prev}");
            prev = v;
        }
    }

    #[test]
    fn de_stein_is_translation_covariant() {
        let k = KernelSpec::imq(0.9);
        let mu = ParticleMeasure::new(vec![vec![0.1], vec![0.8]], vec![0.4, 0.6]).unwrap();
        let nu = ParticleMeasure::new(vec![vec![-0.5], vec![0.3]], vec![0.5, 0.5]).unwrap();
        let c = vec![vec![-0.5], vec![0.0], vec![0.5], vec![1.0]];
        let shift = |p: &ParticleMeasure, s: f64| {
            ParticleMeasure::new(
                p.positions().iter().map(|x| vec![x[0] + s]).collect(),
                p.weights().to_vec(),
            )
            .unwrap()
        };
        let a = de_stein2(&mu.clone().into(), &nu.clone().into(), &k, &c).unwrap().value;
        let cs: Vec<Vec<f64>> = c.iter().map(|x| vec![x[0] + 2.5]).collect();
        let b = de_stein2(&shift(&mu, 2.5).into(), &shift(&nu, 2.5).into(), &k, &cs)
            .unwrap()
            .value;
        assert!((a - b).abs() < 1e-10 * (1.0 + a));
    }

    #[test]
    fn d_wfr_and_ksf_bounds() {
        let g = Grid::new(-2.0, 2.0, 31).unwrap();
        let mu: Measure = bump(g, -0.4, 0.5, 1.0).into();
        let nu: Measure = bump(g, 0.5, 0.7, 1.2).into();
        let k = KernelSpec::gaussian(0.6);
        let centers: Vec<Vec<f64>> = (0..9).map(|i| vec![-2.0 + 0.5 * i as f64]).collect();
        let dw = d_wfr2(&mu, &nu, &k, &centers).unwrap().value;
        let ds = de_stein2(&mu, &nu, &k, &centers).unwrap().value;
        let mm = mmd_center_dual(&mu, &nu, &k, &centers).unwrap().value;
        assert!(dw >= 0.0 && dw <= ds + 1e-12 && dw <= mm + 1e-12, "{dw} {ds} {mm}");
        assert_eq!(d_wfr2(&mu, &mu, &k, &centers).unwrap().value, 0.0);
        let mut prev = f64::INFINITY;
        for a in [0.01, 0.1, 1.0, 10.0] {
            let v = ksf2(&mu, &nu, &k, a, &centers).unwrap().value;
            assert!(v >= 0.0 && v <= prev + 1e-12);
            prev = v;
        }
        assert_eq!(ksf2(&mu, &mu, &k, 1.0, &centers).unwrap().value, 0.0);
        assert!(ksf2(&mu, &nu, &k, 0.0, &centers).is_err());
    }

    #[test]
    fn two_center_hand_cases() {
        // d_wfr2 with Q = G + G12 at centers {0, 1}, sigma = 1, Diracs at 0 and 1:
        // G = [[1, e], [e, 1]], G12 = I, m = (1 - e, e - 1)
        let k = KernelSpec::gaussian(1.0);
        let e = (-0.5f64).exp();
        let c = vec![vec![0.0], vec![1.0]];
        let q = DMatrix::from_row_slice(2, 2, &[2.0, e, e, 2.0]);
        let m = DVector::from_column_slice(&[1.0 - e, e - 1.0]);
        let want = m.dot(&q.clone().lu().solve(&m).unwrap());
        let got = d_wfr2(&dirac(0.0), &dirac(1.0), &k, &c).unwrap().value;
        assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn mmd_fr_is_the_sum() {
        let g = Grid::new(-2.0, 2.0, 41).unwrap();
        let mu = bump(g, 0.0, 0.5, 1.0);
        let nu = bump(g, 0.3, 0.8, 1.5);
        let k = KernelSpec::imq(1.0);
        let m = mmd2(&k, &mu.clone().into(), &nu.clone().into()).unwrap();
        assert_eq!(mmd_fr2(&mu, &nu, &k, 0.0).unwrap(), m);
        let f = fisher_rao2(&mu, &nu).unwrap();
        assert!((mmd_fr2(&mu, &nu, &k, 1.0).unwrap() - (m + f)).abs() < 1e-14);
        assert_eq!(mmd_fr2(&mu, &mu, &k, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn flat_w2_closed_form_matches_dual() {
        let g = Grid::new(-4.0, 4.0, 400).unwrap();
        let mu = bump(g, -0.5, 0.6, 1.0);
        let nu0 = bump(g, 0.7, 0.9, 1.0);
        let nu = nu0.scaled(mu.mass() / nu0.mass());
        let leb = GridMeasure::new(g, vec![1.0; 400]).unwrap();
        let closed = flat_w2(&mu, &nu, &leb).unwrap();
        let dual = flat_w2_dual(&mu, &nu, &leb).unwrap().value;
        assert!((closed - dual).abs() < 1e-6, "{closed} vs {dual}");
        assert_eq!(flat_w2(&mu, &mu, &leb).unwrap(), 0.0);
        let a = flat_w2(&mu.scaled(3.0), &nu.scaled(3.0), &leb).unwrap();
        assert!((a - 9.0 * closed).abs() < 1e-12 * (1.0 + a));
        assert_eq!(flat_w2(&mu, &nu.scaled(1.1), &leb), Err(Error::UnequalMass));
        // unit shift of a narrow bump: F is a smoothed indicator of [-0.5, 0.5]
        // and int F^2 = 1 - 2 s / sqrt(pi) up to exponentially small terms
        let s = 0.05;
        let p = bump(g, -0.5, s, 1.0);
        let q = bump(g, 0.5, s, 1.0);
        let v = flat_w2(&p, &q, &leb).unwrap();
        assert!((v - (1.0 - 2.0 * s / std::f64::consts::PI.sqrt())).abs() < 2e-3, "{v}");
    }

    #[test]
    fn mmd_triangle_inequality() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = Grid::new(-3.0, 3.0, 41).unwrap();
        let k = KernelSpec::laplace(0.8);
        for _ in 0..20 {
            let a: Measure = random_measure(&mut rng, g).into();
            let b: Measure = random_measure(&mut rng, g).into();
            let c: Measure = random_measure(&mut rng, g).into();
            let ab = mmd2(&k, &a, &b).unwrap().max(0.0).sqrt();
            let ac = mmd2(&k, &a, &c).unwrap().max(0.0).sqrt();
            let cb = mmd2(&k, &c, &b).unwrap().max(0.0).sqrt();
            assert!(ab <= ac + cb + 1e-10);
        }
    }
}
