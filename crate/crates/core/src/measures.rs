//! Discrete non-negative measures: densities on a uniform 1-D grid and
//! weighted particle clouds in `d` dimensions.
//!
//! Grid quantities are integrated with the trapezoid rule. Every discrete
//! operator that pairs functions against a grid measure uses the weights
//! `q_i = rho_i * w_i`, where `w_i` are the trapezoid weights.

use crate::error::{Error, Result};

/// Densities below this value are clamped before taking logs or ratios.
pub const DENSITY_FLOOR: f64 = 1e-12;

#[inline]
pub fn floored(x: f64) -> f64 {
    x.max(DENSITY_FLOOR)
}

/// Uniform grid on `[left, right]` with `n` nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    left: f64,
    right: f64,
    n: usize,
}

impl Grid {
    pub fn new(left: f64, right: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 nodes, got {n}")));
        }
        if !(left.is_finite() && right.is_finite()) || right <= left {
            return Err(Error::InvalidGrid(format!("bad interval [{left}, {right}]")));
        }
        Ok(Self { left, right, n })
    }

    pub fn left(&self) -> f64 {
        self.left
    }

    pub fn right(&self) -> f64 {
        self.right
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        (self.right - self.left) / (self.n - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i == self.n - 1 {
            self.right
        } else {
            self.left + i as f64 * self.spacing()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.node(i)).collect()
    }

    /// Trapezoid quadrature weights.
    pub fn weights(&self) -> Vec<f64> {
        let h = self.spacing();
        let mut w = vec![h; self.n];
        w[0] = 0.5 * h;
        w[self.n - 1] = 0.5 * h;
        w
    }

    /// Nodes as 1-D points, for kernel evaluations.
    pub fn points(&self) -> Vec<Vec<f64>> {
        self.nodes().into_iter().map(|x| vec![x]).collect()
    }

    /// Evaluates `f` at every node.
    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.nodes().into_iter().map(f).collect()
    }

    /// Second-order central difference, one-sided at the two boundary nodes.
    pub fn gradient(&self, values: &[f64]) -> Vec<f64> {
        let n = self.n;
        let h = self.spacing();
        let mut g = vec![0.0; n];
        g[0] = (values[1] - values[0]) / h;
        g[n - 1] = (values[n - 1] - values[n - 2]) / h;
        for i in 1..n - 1 {
            g[i] = (values[i + 1] - values[i - 1]) / (2.0 * h);
        }
        g
    }

    /// Conservative divergence of a nodal flux with zero flux through both
    /// ends. It is the negative trapezoid-adjoint of [`Grid::gradient`]:
    /// `sum_i w_i a_i div(F)_i = -sum_i w_i F_i grad(a)_i`, so
    /// `sum_i w_i div(F)_i = 0` for every flux.
    pub fn divergence(&self, flux: &[f64]) -> Vec<f64> {
        let n = self.n;
        let h = self.spacing();
        let mut d = vec![0.0; n];
        d[0] = (flux[0] + flux[1]) / h;
        d[n - 1] = -(flux[n - 2] + flux[n - 1]) / h;
        for i in 1..n - 1 {
            d[i] = (flux[i + 1] - flux[i - 1]) / (2.0 * h);
        }
        d
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidMeasure(format!("{what} has non-finite entry at {i}")));
    }
    Ok(())
}

/// Non-negative density samples on a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridMeasure {
    grid: Grid,
    density: Vec<f64>,
}

impl GridMeasure {
    pub fn new(grid: Grid, density: Vec<f64>) -> Result<Self> {
        if density.len() != grid.len() {
            return Err(Error::InvalidMeasure(format!(
                "density has {} entries for a grid of {}",
                density.len(),
                grid.len()
            )));
        }
        check_finite(&density, "density")?;
        if let Some(i) = density.iter().position(|&v| v < 0.0) {
            return Err(Error::InvalidMeasure(format!("negative density at node {i}")));
        }
        Ok(Self { grid, density })
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(grid, grid.sample(f))
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            density: vec![0.0; grid.len()],
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn into_density(self) -> Vec<f64> {
        self.density
    }

    /// Trapezoid mass `sum_i rho_i w_i`.
    pub fn mass(&self) -> f64 {
        self.grid.weights().iter().zip(&self.density).map(|(w, r)| w * r).sum()
    }

    /// Per-node quadrature mass `q_i = rho_i w_i`.
    pub fn node_weights(&self) -> Vec<f64> {
        self.grid
            .weights()
            .iter()
            .zip(&self.density)
            .map(|(w, r)| w * r)
            .collect()
    }

    pub fn normalize(&self) -> Result<Self> {
        let m = self.mass();
        if !(m > 0.0) {
            return Err(Error::NullMeasure);
        }
        Ok(self.scaled(1.0 / m))
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            grid: self.grid,
            density: self.density.iter().map(|r| r * c).collect(),
        }
    }

    /// `a * self + b * other`; both coefficients must keep the result non-negative.
    pub fn combine(&self, a: f64, other: &GridMeasure, b: f64) -> Result<Self> {
        self.same_grid(other)?;
        let density = self
            .density
            .iter()
            .zip(&other.density)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Self::new(self.grid, density)
    }

    pub fn same_grid(&self, other: &GridMeasure) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::IncompatibleGrids);
        }
        Ok(())
    }

    pub fn atoms(&self) -> Atoms {
        Atoms {
            points: self.grid.points(),
            weights: self.node_weights(),
        }
    }
}

/// Real-valued samples on a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: Grid,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidArgument(format!(
                "function has {} values for a grid of {}",
                values.len(),
                grid.len()
            )));
        }
        check_finite(&values, "grid function")?;
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(grid, grid.sample(f))
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        Self {
            grid,
            values: vec![c; grid.len()],
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// `int f g dmu` by trapezoid quadrature.
pub fn weighted_inner(f: &GridFunction, g: &GridFunction, m: &GridMeasure) -> Result<f64> {
    if f.grid != m.grid || g.grid != m.grid {
        return Err(Error::IncompatibleGrids);
    }
    Ok(inner_q(&f.values, &g.values, &m.node_weights()))
}

/// `sum_i a_i b_i q_i`.
pub fn inner_q(a: &[f64], b: &[f64], q: &[f64]) -> f64 {
    a.iter().zip(b).zip(q).map(|((x, y), w)| x * y * w).sum()
}

/// Weighted particle cloud in `d` dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleMeasure {
    positions: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl ParticleMeasure {
    pub fn new(positions: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidMeasure(
                "particle measure needs at least one particle".into(),
            ));
        }
        if positions.len() != weights.len() {
            return Err(Error::InvalidMeasure(format!(
                "{} positions but {} weights",
                positions.len(),
                weights.len()
            )));
        }
        let d = positions[0].len();
        if d == 0 {
            return Err(Error::InvalidMeasure("zero-dimensional particles".into()));
        }
        for p in &positions {
            if p.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: p.len(),
                });
            }
            check_finite(p, "position")?;
        }
        check_finite(&weights, "weights")?;
        if let Some(i) = weights.iter().position(|&w| w < 0.0) {
            return Err(Error::InvalidMeasure(format!("negative weight at particle {i}")));
        }
        Ok(Self { positions, weights })
    }

    /// Equal weights `mass / n`.
    pub fn uniform(positions: Vec<Vec<f64>>, mass: f64) -> Result<Self> {
        let n = positions.len().max(1);
        Self::new(positions, vec![mass / n as f64; n])
    }

    pub fn positions(&self) -> &[Vec<f64>] {
        &self.positions
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.positions[0].len()
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn atoms(&self) -> Atoms {
        Atoms {
            points: self.positions.clone(),
            weights: self.weights.clone(),
        }
    }

    /// Gaussian kernel density estimate of a 1-D cloud, rendered on `grid`.
    pub fn kde_on(&self, grid: &Grid, bandwidth: f64) -> Result<GridMeasure> {
        if self.dim() != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: self.dim(),
            });
        }
        if !(bandwidth > 0.0) {
            return Err(Error::InvalidArgument("kde bandwidth must be positive".into()));
        }
        let norm = 1.0 / (bandwidth * (2.0 * std::f64::consts::PI).sqrt());
        GridMeasure::from_fn(*grid, |x| {
            self.positions
                .iter()
                .zip(&self.weights)
                .map(|(p, w)| {
                    let z = (x - p[0]) / bandwidth;
                    w * norm * (-0.5 * z * z).exp()
                })
                .sum()
        })
    }
}

/// Signed weighted point set; the common currency of kernel sums.
#[derive(Debug, Clone, PartialEq)]
pub struct Atoms {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl Atoms {
    /// `self - other`, merging weights when both live on the same points.
    pub fn difference(&self, other: &Atoms) -> Atoms {
        if self.points == other.points {
            return Atoms {
                points: self.points.clone(),
                weights: self.weights.iter().zip(&other.weights).map(|(a, b)| a - b).collect(),
            };
        }
        let mut points = self.points.clone();
        points.extend(other.points.iter().cloned());
        let mut weights = self.weights.clone();
        weights.extend(other.weights.iter().map(|w| -w));
        Atoms { points, weights }
    }

    pub fn dim(&self) -> Option<usize> {
        self.points.first().map(Vec::len)
    }
}

/// Either kind of discrete measure.
#[derive(Debug, Clone, PartialEq)]
pub enum Measure {
    Grid(GridMeasure),
    Particles(ParticleMeasure),
}

impl Measure {
    pub fn mass(&self) -> f64 {
        match self {
            Measure::Grid(m) => m.mass(),
            Measure::Particles(p) => p.mass(),
        }
    }

    pub fn atoms(&self) -> Atoms {
        match self {
            Measure::Grid(m) => m.atoms(),
            Measure::Particles(p) => p.atoms(),
        }
    }

    pub fn as_grid(&self) -> Option<&GridMeasure> {
        match self {
            Measure::Grid(m) => Some(m),
            Measure::Particles(_) => None,
        }
    }

    pub fn as_particles(&self) -> Option<&ParticleMeasure> {
        match self {
            Measure::Particles(p) => Some(p),
            Measure::Grid(_) => None,
        }
    }
}

impl From<GridMeasure> for Measure {
    fn from(m: GridMeasure) -> Self {
        Measure::Grid(m)
    }
}

impl From<ParticleMeasure> for Measure {
    fn from(p: ParticleMeasure) -> Self {
        Measure::Particles(p)
    }
}
