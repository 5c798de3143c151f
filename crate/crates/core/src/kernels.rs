//! Radial kernels, Gram matrices and the measure-weighted integral operator
//! `(K_mu f)(x_i) = sum_j k(x_i, x_j) f_j q_j`.
//!
//! `K_mu = K diag(q)` is not symmetric. Solves and spectral functions work on
//! the similar matrix `S = diag(sqrt q) K diag(sqrt q)` restricted to the
//! support of `q`; rows with `q_i = 0` are recovered exactly from the block
//! lower-triangular structure of `K diag(q)`.
//!
//! Weights are used as given: the operator of an unnormalized measure is not
//! rescaled to a probability measure.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::Atoms;

/// Relative diagonal jitter `1e-12 * trace(S) / n` used by every factorization.
pub const JITTER_SCALE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Gaussian,
    Laplace,
    #[serde(alias = "imq")]
    InverseMultiquadric,
}

/// Positive-definite radial kernel `k(x, y) = a * profile(|x - y| / sigma)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub bandwidth: f64,
    #[serde(default = "unit_scale")]
    pub scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn check_dims(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    Ok(())
}

impl KernelSpec {
    pub fn new(family: KernelFamily, bandwidth: f64, scale: f64) -> Result<Self> {
        let k = Self {
            family,
            bandwidth,
            scale,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn gaussian(bandwidth: f64) -> Self {
        Self {
            family: KernelFamily::Gaussian,
            bandwidth,
            scale: 1.0,
        }
    }

    pub fn laplace(bandwidth: f64) -> Self {
        Self {
            family: KernelFamily::Laplace,
            bandwidth,
            scale: 1.0,
        }
    }

    pub fn imq(bandwidth: f64) -> Self {
        Self {
            family: KernelFamily::InverseMultiquadric,
            bandwidth,
            scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "kernel bandwidth must be positive, got {}",
                self.bandwidth
            )));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "kernel scale must be positive, got {}",
                self.scale
            )));
        }
        Ok(())
    }

    /// Kernel value as a function of the squared distance.
    pub fn radial(&self, r2: f64) -> f64 {
        let s2 = self.bandwidth * self.bandwidth;
        let a = self.scale;
        match self.family {
            KernelFamily::Gaussian => a * (-r2 / (2.0 * s2)).exp(),
            KernelFamily::Laplace => a * (-r2.sqrt() / self.bandwidth).exp(),
            KernelFamily::InverseMultiquadric => a / (1.0 + r2 / s2).sqrt(),
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dims(x, y)?;
        Ok(self.radial(sq_dist(x, y)))
    }

    /// `grad_x k(x, y)`.
    pub fn grad_x(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        check_dims(x, y)?;
        let r2 = sq_dist(x, y);
        let s2 = self.bandwidth * self.bandwidth;
        // grad_x k = -coef * (x - y)
        let coef = match self.family {
            KernelFamily::Gaussian => self.radial(r2) / s2,
            KernelFamily::Laplace => {
                if r2 == 0.0 {
                    return Err(Error::NotDifferentiable);
                }
                self.radial(r2) / (self.bandwidth * r2.sqrt())
            }
            KernelFamily::InverseMultiquadric => self.scale / s2 * (1.0 + r2 / s2).powf(-1.5),
        };
        Ok(x.iter().zip(y).map(|(a, b)| -coef * (a - b)).collect())
    }

    /// `sum_d d/dx_d d/dy_d k(x, y)`: the RKHS inner product of the gradient
    /// features at `x` and `y`.
    pub fn mixed_second(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dims(x, y)?;
        let d = x.len() as f64;
        let r2 = sq_dist(x, y);
        let s2 = self.bandwidth * self.bandwidth;
        match self.family {
            KernelFamily::Gaussian => Ok(self.radial(r2) * (d / s2 - r2 / (s2 * s2))),
            KernelFamily::InverseMultiquadric => {
                let u = 1.0 + r2 / s2;
                Ok(self.scale * (d * u.powf(-1.5) / s2 - 3.0 * r2 / (s2 * s2) * u.powf(-2.5)))
            }
            KernelFamily::Laplace => Err(Error::NotDifferentiable),
        }
    }

    pub fn is_differentiable(&self) -> bool {
        self.family != KernelFamily::Laplace
    }
}

/// Median pairwise distance; a common bandwidth default.
pub fn median_heuristic(points: &[Vec<f64>]) -> Option<f64> {
    let mut d: Vec<f64> = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            d.push(sq_dist(&points[i], &points[j]).sqrt());
        }
    }
    if d.is_empty() {
        return None;
    }
    d.sort_by(|a, b| a.total_cmp(b));
    let m = d.len() / 2;
    Some(if d.len() % 2 == 1 {
        d[m]
    } else {
        0.5 * (d[m - 1] + d[m])
    })
}

/// Symmetric Gram matrix `K_ij = k(x_i, x_j)`; the upper triangle is
/// evaluated and mirrored so the result is exactly symmetric.
pub fn gram(k: &KernelSpec, points: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = points.len();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = k.eval(&points[i], &points[j])?;
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    Ok(g)
}

/// `K_ij = k(a_i, b_j)`.
pub fn cross_gram(k: &KernelSpec, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let mut g = DMatrix::zeros(a.len(), b.len());
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            g[(i, j)] = k.eval(x, y)?;
        }
    }
    Ok(g)
}

/// `x -> int k(x, y) dmu(y)` at each query point.
pub fn kernel_mean_embedding(k: &KernelSpec, mu: &Atoms, queries: &[Vec<f64>]) -> Result<Vec<f64>> {
    queries
        .iter()
        .map(|x| {
            let mut s = 0.0;
            for (y, w) in mu.points.iter().zip(&mu.weights) {
                if *w != 0.0 {
                    s += w * k.eval(x, y)?;
                }
            }
            Ok(s)
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Discrete integral operator `f -> K diag(q) f`.
#[derive(Debug, Clone)]
pub struct WeightedOperator {
    gram: DMatrix<f64>,
    weights: Vec<f64>,
    jitter_scale: f64,
}

/// Eigendecomposition of the symmetrized operator on the support of `q`.
struct Spectrum {
    support: Vec<usize>,
    zero: Vec<usize>,
    sqrt_q: Vec<f64>,
    values: Vec<f64>,
    vectors: DMatrix<f64>,
}

impl WeightedOperator {
    pub fn new(gram: DMatrix<f64>, weights: Vec<f64>) -> Result<Self> {
        if gram.nrows() != gram.ncols() || gram.nrows() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: gram.nrows(),
                got: weights.len(),
            });
        }
        if weights.iter().any(|&q| !(q >= 0.0) || !q.is_finite()) {
            return Err(Error::InvalidArgument(
                "operator weights must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            gram,
            weights,
            jitter_scale: JITTER_SCALE,
        })
    }

    pub fn from_atoms(k: &KernelSpec, atoms: &Atoms) -> Result<Self> {
        Self::new(gram(k, &atoms.points)?, atoms.weights.clone())
    }

    /// Replaces the relative jitter (zero disables it).
    pub fn with_jitter(mut self, jitter_scale: f64) -> Self {
        self.jitter_scale = jitter_scale;
        self
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn check_len(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: f.len(),
            });
        }
        Ok(())
    }

    fn split(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.len()).partition(|&i| self.weights[i] > 0.0)
    }

    fn symmetrized(&self, support: &[usize]) -> (DMatrix<f64>, Vec<f64>) {
        let sq: Vec<f64> = support.iter().map(|&i| self.weights[i].sqrt()).collect();
        let m = support.len();
        let s = DMatrix::from_fn(m, m, |a, b| sq[a] * self.gram[(support[a], support[b])] * sq[b]);
        (s, sq)
    }

    /// Diagonal jitter for the symmetrized operator on `support`.
    pub fn jitter(&self) -> f64 {
        let (support, _) = self.split();
        if support.is_empty() {
            return 0.0;
        }
        let trace: f64 = support.iter().map(|&i| self.weights[i] * self.gram[(i, i)]).sum();
        self.jitter_scale * trace / support.len() as f64
    }

    /// `(K_mu f)_i = sum_j K_ij f_j q_j`.
    pub fn apply(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.check_len(f)?;
        let n = self.len();
        Ok((0..n)
            .map(|i| (0..n).map(|j| self.gram[(i, j)] * f[j] * self.weights[j]).sum())
            .collect())
    }

    /// Solves `(K_mu + lambda I) v = rhs`.
    ///
    /// Support rows go through a Cholesky factorization of `S + (lambda + jitter) I`
    /// followed (for `lambda > 0`) by one step of iterative refinement against
    /// the unjittered system. Zero-weight rows are then exact:
    /// `v_i = (rhs_i - (K_mu v)_i) / lambda`.
    pub fn solve_regularized(&self, lambda: f64, rhs: &[f64]) -> Result<Vec<f64>> {
        self.check_len(rhs)?;
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "ridge must be non-negative, got {lambda}"
            )));
        }
        let (support, zero) = self.split();
        if lambda == 0.0 && !zero.is_empty() {
            return Err(Error::SingularOperator);
        }
        let jit = self.jitter();
        if lambda == 0.0 && jit == 0.0 {
            return Err(Error::SingularOperator);
        }
        let mut v = vec![0.0; self.len()];
        if !support.is_empty() {
            let (mut s, sq) = self.symmetrized(&support);
            for a in 0..support.len() {
                s[(a, a)] += lambda + jit;
            }
            let chol = s.cholesky().ok_or(Error::SingularOperator)?;
            let solve_support = |r: &[f64]| -> Vec<f64> {
                let b = DVector::from_iterator(support.len(), support.iter().enumerate().map(|(a, &i)| sq[a] * r[i]));
                let u = chol.solve(&b);
                // k_u[a] = sum_b K_{ab} sqrt(q_b) u_b = (K_mu v)_a for v = u / sqrt(q)
                support
                    .iter()
                    .enumerate()
                    .map(|(a, &i)| {
                        if lambda == 0.0 || sq[a] * sq[a] >= lambda * lambda {
                            u[a] / sq[a]
                        } else {
                            let ku: f64 = support
                                .iter()
                                .enumerate()
                                .map(|(b, &j)| self.gram[(i, j)] * sq[b] * u[b])
                                .sum();
                            (r[i] - ku) / lambda
                        }
                    })
                    .collect()
            };
            let vs = solve_support(rhs);
            for (a, &i) in support.iter().enumerate() {
                v[i] = vs[a];
            }
            if lambda > 0.0 {
                let kv = self.apply(&v)?;
                let mut res = vec![0.0; self.len()];
                for &i in &support {
                    res[i] = rhs[i] - kv[i] - lambda * v[i];
                }
                let dv = solve_support(&res);
                for (a, &i) in support.iter().enumerate() {
                    v[i] += dv[a];
                }
            }
        }
        if !zero.is_empty() {
            let kv = self.apply(&v)?;
            for &i in &zero {
                v[i] = (rhs[i] - kv[i]) / lambda;
            }
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::SingularOperator);
        }
        Ok(v)
    }

    /// Residual `||(K_mu + lambda I) v - rhs||_2`.
    pub fn residual(&self, lambda: f64, v: &[f64], rhs: &[f64]) -> Result<f64> {
        let kv = self.apply(v)?;
        let r: Vec<f64> = kv
            .iter()
            .zip(v)
            .zip(rhs)
            .map(|((a, b), c)| a + lambda * b - c)
            .collect();
        Ok(norm(&r))
    }

    fn spectrum(&self) -> Result<Spectrum> {
        let (support, zero) = self.split();
        let (s, sqrt_q) = self.symmetrized(&support);
        if s.iter().any(|x| !x.is_finite()) {
            return Err(Error::EigenFailure);
        }
        let eig = SymmetricEigen::try_new(s, f64::EPSILON, 10_000).ok_or(Error::EigenFailure)?;
        let values = eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
        Ok(Spectrum {
            support,
            zero,
            sqrt_q,
            values,
            vectors: eig.eigenvectors,
        })
    }

    /// Applies `g(K_mu + shift I)` through the spectral theorem.
    ///
    /// Zero-weight rows use the divided differences `(g(s + shift) - g(shift)) / s`
    /// of the block lower-triangular operator.
    pub fn spectral_apply(&self, shift: f64, g: impl Fn(f64) -> f64, f: &[f64]) -> Result<Vec<f64>> {
        self.check_len(f)?;
        let sp = self.spectrum()?;
        let m = sp.support.len();
        let coeffs: Vec<f64> = (0..m)
            .map(|j| {
                (0..m)
                    .map(|a| sp.vectors[(a, j)] * sp.sqrt_q[a] * f[sp.support[a]])
                    .sum()
            })
            .collect();
        let mut out = vec![0.0; self.len()];
        for (a, &i) in sp.support.iter().enumerate() {
            let s: f64 = (0..m)
                .map(|j| sp.vectors[(a, j)] * g(sp.values[j] + shift) * coeffs[j])
                .sum();
            out[i] = s / sp.sqrt_q[a];
        }
        if !sp.zero.is_empty() {
            let g0 = g(shift);
            let floor = self.jitter().max(f64::MIN_POSITIVE);
            let dd: Vec<f64> = sp
                .values
                .iter()
                .map(|&s| {
                    let s = s.max(floor);
                    (g(s + shift) - g0) / s
                })
                .collect();
            // y_a = sum_j V_aj dd_j c_j, then row i: sum_a K_ia sqrt(q_a) y_a
            let y: Vec<f64> = (0..m)
                .map(|a| (0..m).map(|j| sp.vectors[(a, j)] * dd[j] * coeffs[j]).sum())
                .collect();
            for &i in &sp.zero {
                let s: f64 = sp
                    .support
                    .iter()
                    .enumerate()
                    .map(|(a, &k)| self.gram[(i, k)] * sp.sqrt_q[a] * y[a])
                    .sum();
                out[i] = s + if g0.is_finite() { g0 * f[i] } else { 0.0 };
            }
        }
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::EigenFailure);
        }
        Ok(out)
    }

    /// `K_mu^alpha f`; negative powers shift the spectrum by the jitter.
    pub fn operator_power(&self, alpha: f64, f: &[f64]) -> Result<Vec<f64>> {
        if alpha == 0.0 {
            self.check_len(f)?;
            return Ok(f.to_vec());
        }
        let shift = if alpha < 0.0 { self.jitter() } else { 0.0 };
        self.spectral_apply(shift, |x| if x == 0.0 { 0.0 } else { x.powf(alpha) }, f)
    }

    /// `(K_mu + lambda I)^alpha f`.
    pub fn regularized_power(&self, lambda: f64, alpha: f64, f: &[f64]) -> Result<Vec<f64>> {
        let shift = if alpha < 0.0 && lambda == 0.0 {
            self.jitter()
        } else {
            lambda
        };
        self.spectral_apply(shift, |x| x.powf(alpha), f)
    }

    /// Eigenvalues of `K_mu` on the support together with the coefficients
    /// `c_j = <f, e_j>_{L^2_mu}` of `f` in the `L^2_mu`-orthonormal eigenbasis.
    pub fn spectral_coefficients(&self, f: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_len(f)?;
        let sp = self.spectrum()?;
        let m = sp.support.len();
        let coeffs = (0..m)
            .map(|j| {
                (0..m)
                    .map(|a| sp.vectors[(a, j)] * sp.sqrt_q[a] * f[sp.support[a]])
                    .sum()
            })
            .collect();
        Ok((sp.values, coeffs))
    }
}
