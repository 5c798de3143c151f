//! Seeded random test corpus: 20 positive grid measures, 3 kernels and the
//! 4 divergence energies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::energies::{DivergenceKind, EnergySpec};
use crate::kernels::KernelSpec;
use crate::measures::{Grid, GridMeasure};

pub const DEFAULT_SEED: u64 = 20_240_611;
pub const MEASURE_COUNT: usize = 20;

#[derive(Debug, Clone)]
pub struct Corpus {
    pub seed: u64,
    pub grid: Grid,
    pub measures: Vec<GridMeasure>,
    pub kernels: Vec<KernelSpec>,
}

/// A positive measure made of one to three gaussian bumps over a floor.
pub fn random_measure(rng: &mut impl Rng, grid: Grid) -> GridMeasure {
    let bumps: Vec<(f64, f64, f64)> = (0..rng.gen_range(1..=3))
        .map(|_| {
            (
                rng.gen_range(0.2..1.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(0.3..1.2),
            )
        })
        .collect();
    let floor = rng.gen_range(0.02..0.3);
    let raw = GridMeasure::from_fn(grid, |x| {
        floor
            + bumps
                .iter()
                .map(|(a, m, s)| a * (-(x - m) * (x - m) / (2.0 * s * s)).exp())
                .sum::<f64>()
    })
    .expect("bumps are finite and positive");
    let mass = rng.gen_range(0.5..2.0);
    raw.scaled(mass / raw.mass())
}

impl Corpus {
    pub fn new(seed: u64) -> Self {
        let grid = Grid::new(-4.0, 4.0, 101).expect("valid grid");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let measures = (0..MEASURE_COUNT).map(|_| random_measure(&mut rng, grid)).collect();
        let kernels = vec![
            KernelSpec::gaussian(0.8),
            KernelSpec::laplace(1.0),
            KernelSpec::imq(1.2),
        ];
        Self {
            seed,
            grid,
            measures,
            kernels,
        }
    }

    /// The four divergence energies towards `target`.
    pub fn energies(&self, target: &GridMeasure) -> Vec<EnergySpec> {
        DivergenceKind::ALL
            .iter()
            .map(|&k| EnergySpec::divergence(k, target.clone()))
            .collect()
    }

    /// Consecutive pairs `(measures[i], measures[i + 1])`, wrapping around.
    pub fn pairs(&self) -> impl Iterator<Item = (&GridMeasure, &GridMeasure)> {
        let n = self.measures.len();
        (0..n).map(move |i| (&self.measures[i], &self.measures[(i + 1) % n]))
    }
}

impl Default for Corpus {
    fn default() -> Self {
        Self::new(DEFAULT_SEED)
    }
}
