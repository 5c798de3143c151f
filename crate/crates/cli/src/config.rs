//! JSON experiment configuration and its resolution into library objects.

use std::fs;
use std::path::{Path, PathBuf};

use kflow::energies::EnergySpec;
use kflow::energies::{AnalyticDensity, DivergenceKind, MixtureComponent, Potential, Reference};
use kflow::flows::{Diagnostic, GeometrySpec, Scheme};
use kflow::io::{read_grid_measure, read_particles};
use kflow::{Grid, GridMeasure, KernelSpec, Measure, ParticleMeasure};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;

use crate::error::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Flow,
    Geodesic,
    Discrepancy,
    StudyGamma,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Flow => "flow",
            Task::Geodesic => "geodesic",
            Task::Discrepancy => "discrepancy",
            Task::StudyGamma => "study_gamma",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    pub task: Task,
    #[serde(default)]
    pub grid: GridConfig,
    pub geometry: Option<GeometryConfig>,
    pub energy: Option<EnergyConfig>,
    pub kernel: Option<KernelSpec>,
    pub initial: Option<MeasureConfig>,
    pub target: Option<MeasureConfig>,
    pub time: Option<TimeConfig>,
    pub scheme: Option<SchemeConfig>,
    #[serde(default)]
    pub diagnostics: Vec<DiagnosticConfig>,
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    pub geodesic: Option<GeodesicConfig>,
    #[serde(default)]
    pub discrepancies: Vec<DiscrepancyConfig>,
    pub study: Option<StudyConfig>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub left: f64,
    pub right: f64,
    pub n: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            left: -6.0,
            right: 6.0,
            n: 201,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeometryConfig {
    FisherRao,
    KernelizedFr,
    KrrApproxFr {
        lambda: f64,
    },
    Mmd,
    SphericalMmd,
    FrRegMmd {
        lambda: f64,
    },
    MmdRegFr {
        lambda: f64,
    },
    Stein,
    RegularizedStein {
        lambda: f64,
    },
    WfrApprox {
        lambda: f64,
        transport_kernel: Option<KernelSpec>,
    },
    FlattenedFr {
        omega: MeasureConfig,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnergyConfig {
    /// Divergence towards the top-level `target`.
    Divergence {
        kind: DivergenceKind,
    },
    Potential {
        potential: Potential,
    },
    /// `1/2 MMD^2` to the top-level `target` with the top-level `kernel`.
    Mmd,
    Combination {
        terms: Vec<EnergyTerm>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyTerm {
    pub weight: f64,
    pub energy: EnergyConfig,
}

/// A measure rendered on the grid, read from CSV, or sampled as particles.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureConfig {
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
    /// Grid measure in `x,density` format, relative to the config file.
    Csv {
        path: PathBuf,
    },
    /// Weighted particles in `w,x1..xd` format.
    ParticlesCsv {
        path: PathBuf,
    },
    /// `count` equally weighted samples of an analytic density, drawn with the config seed.
    Particles {
        count: usize,
        density: AnalyticDensity,
    },
}

fn unit() -> f64 {
    1.0
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub t_end: f64,
    pub dt: f64,
    #[serde(default = "one")]
    pub record_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeConfig {
    ExplicitEuler,
    Multiplicative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticConfig {
    Mmd2,
    FisherRao2,
    Chi2,
    ReverseChi2,
    Ksd2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeodesicKind {
    FisherRao,
    Mmd,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeodesicConfig {
    pub kind: GeodesicKind,
    /// Number of intervals `K`; snapshots are taken at `s = 0, 1/K, ..., 1`.
    pub snapshots: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiscrepancyConfig {
    Mmd2,
    MmdDual,
    FisherRao2,
    Chi2,
    ReverseChi2,
    FlattenedFr2 { omega: MeasureConfig },
    Ksd2,
    DeStein2,
    DWfr2,
    Ksf2 { a: f64 },
    MmdFr2 { lambda: f64 },
    FlatW2 { omega: MeasureConfig },
    FlatW2Dual { omega: MeasureConfig },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub lambdas: Vec<f64>,
}

/// Reads and strictly parses a configuration document.
pub fn parse_config(text: &str) -> Result<Config, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: Config = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("at `{path}`: {}", e.into_inner()))
    })?;
    if cfg.version != CONFIG_VERSION {
        return Err(CliError::Config(format!(
            "unsupported version {} (expected {CONFIG_VERSION})",
            cfg.version
        )));
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<Config, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

/// A config together with the directory its relative paths refer to.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: Config,
    pub base: PathBuf,
    pub seed: u64,
}

fn cfg_err(e: kflow::Error) -> CliError {
    CliError::Config(e.to_string())
}

fn missing(field: &str, task: Task) -> CliError {
    CliError::Config(format!("`{field}` is required for task {}", task.name()))
}

impl Context {
    pub fn new(config: Config, base: PathBuf, seed_override: Option<u64>) -> Self {
        let seed = seed_override.unwrap_or(config.seed);
        Self { config, base, seed }
    }

    pub fn task(&self) -> Task {
        self.config.task
    }

    pub fn grid(&self) -> Result<Grid, CliError> {
        let g = self.config.grid;
        Grid::new(g.left, g.right, g.n).map_err(cfg_err)
    }

    pub fn kernel(&self) -> Result<KernelSpec, CliError> {
        let k = self.config.kernel.ok_or_else(|| missing("kernel", self.task()))?;
        k.validate().map_err(cfg_err)?;
        Ok(k)
    }

    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// Salt keeps the initial and target samplers independent under one seed.
    pub fn measure(&self, m: &MeasureConfig, salt: u64) -> Result<Measure, CliError> {
        let grid = self.grid()?;
        let read = |p: &Path| {
            fs::File::open(self.path(p)).map_err(|e| CliError::Config(format!("cannot open {}: {e}", p.display())))
        };
        Ok(match m {
            MeasureConfig::Csv { path } => {
                let gm = read_grid_measure(read(path)?).map_err(cfg_err)?;
                if *gm.grid() != grid {
                    return Err(CliError::Config(format!(
                        "{} is not on the configured grid",
                        path.display()
                    )));
                }
                gm.into()
            }
            MeasureConfig::ParticlesCsv { path } => read_particles(read(path)?).map_err(cfg_err)?.into(),
            MeasureConfig::Particles { count, density } => {
                density.validate().map_err(cfg_err)?;
                if *count == 0 {
                    return Err(CliError::Config("particle count must be positive".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ salt);
                let xs = (0..*count)
                    .map(|_| sample(density, &mut rng).map(|x| vec![x]))
                    .collect::<Result<Vec<_>, _>>()?;
                let mass = density.total_mass();
                if !(mass > 0.0) {
                    return Err(CliError::Config("sampled density must have positive mass".into()));
                }
                ParticleMeasure::new(xs, vec![mass / *count as f64; *count])
                    .map_err(cfg_err)?
                    .into()
            }
            other => analytic(other)
                .expect("analytic family")
                .render(&grid)
                .map_err(cfg_err)?
                .into(),
        })
    }

    pub fn initial(&self) -> Result<Measure, CliError> {
        let m = self
            .config
            .initial
            .as_ref()
            .ok_or_else(|| missing("initial", self.task()))?;
        self.measure(m, 0x1)
    }

    pub fn target(&self) -> Result<Measure, CliError> {
        let m = self
            .config
            .target
            .as_ref()
            .ok_or_else(|| missing("target", self.task()))?;
        self.measure(m, 0x2)
    }

    pub fn initial_grid(&self) -> Result<GridMeasure, CliError> {
        grid_only(self.initial()?, "initial")
    }

    pub fn target_grid(&self) -> Result<GridMeasure, CliError> {
        grid_only(self.target()?, "target")
    }

    fn reference(&self) -> Result<Reference, CliError> {
        let m = self
            .config
            .target
            .as_ref()
            .ok_or_else(|| missing("target", self.task()))?;
        match analytic(m) {
            Some(a) => {
                a.validate().map_err(cfg_err)?;
                Ok(Reference::Analytic(a))
            }
            None => Ok(Reference::Density(self.target_grid()?)),
        }
    }

    fn energy_from(&self, e: &EnergyConfig) -> Result<EnergySpec, CliError> {
        let spec = match e {
            EnergyConfig::Divergence { kind } => EnergySpec::PhiDivergence {
                kind: *kind,
                target: self.reference()?,
            },
            EnergyConfig::Potential { potential } => EnergySpec::Potential(potential.clone()),
            EnergyConfig::Mmd => EnergySpec::Mmd {
                target: self.target()?,
                kernel: self.kernel()?,
            },
            EnergyConfig::Combination { terms } => EnergySpec::Combination(
                terms
                    .iter()
                    .map(|t| Ok((t.weight, self.energy_from(&t.energy)?)))
                    .collect::<Result<_, CliError>>()?,
            ),
        };
        spec.validate().map_err(cfg_err)?;
        Ok(spec)
    }

    pub fn energy(&self) -> Result<EnergySpec, CliError> {
        let e = self
            .config
            .energy
            .as_ref()
            .ok_or_else(|| missing("energy", self.task()))?;
        self.energy_from(e)
    }

    pub fn geometry(&self) -> Result<GeometrySpec, CliError> {
        let g = self
            .config
            .geometry
            .as_ref()
            .ok_or_else(|| missing("geometry", self.task()))?;
        let spec = match g {
            GeometryConfig::FisherRao => GeometrySpec::FisherRao,
            GeometryConfig::KernelizedFr => GeometrySpec::KernelizedFr { kernel: self.kernel()? },
            GeometryConfig::KrrApproxFr { lambda } => GeometrySpec::KrrApproxFr {
                kernel: self.kernel()?,
                lambda: *lambda,
            },
            GeometryConfig::Mmd => GeometrySpec::MmdFlow { kernel: self.kernel()? },
            GeometryConfig::SphericalMmd => GeometrySpec::SphericalMmd { kernel: self.kernel()? },
            GeometryConfig::FrRegMmd { lambda } => GeometrySpec::FrRegMmd {
                kernel: self.kernel()?,
                lambda: *lambda,
            },
            GeometryConfig::MmdRegFr { lambda } => GeometrySpec::MmdRegFr {
                kernel: self.kernel()?,
                lambda: *lambda,
            },
            GeometryConfig::Stein => GeometrySpec::Stein { kernel: self.kernel()? },
            GeometryConfig::RegularizedStein { lambda } => GeometrySpec::RegularizedStein {
                kernel: self.kernel()?,
                lambda: *lambda,
            },
            GeometryConfig::WfrApprox {
                lambda,
                transport_kernel,
            } => {
                let k = self.kernel()?;
                let kt = transport_kernel.unwrap_or(k);
                kt.validate().map_err(cfg_err)?;
                GeometrySpec::WfrApprox {
                    k_transport: kt,
                    k_reaction: k,
                    lambda: *lambda,
                }
            }
            GeometryConfig::FlattenedFr { omega } => GeometrySpec::FlattenedFr {
                omega: grid_only(self.measure(omega, 0x3)?, "omega")?,
            },
        };
        spec.validate().map_err(cfg_err)?;
        Ok(spec)
    }

    pub fn time(&self) -> Result<TimeConfig, CliError> {
        let t = self.config.time.ok_or_else(|| missing("time", self.task()))?;
        if !(t.t_end > 0.0 && t.t_end.is_finite()) || !(t.dt > 0.0 && t.dt.is_finite()) || t.record_every == 0 {
            return Err(CliError::Config(
                "time needs t_end > 0, dt > 0 and record_every >= 1".into(),
            ));
        }
        Ok(t)
    }

    pub fn scheme(&self) -> Option<Scheme> {
        self.config.scheme.map(|s| match s {
            SchemeConfig::ExplicitEuler => Scheme::ExplicitEuler,
            SchemeConfig::Multiplicative => Scheme::Multiplicative,
        })
    }

    pub fn diagnostics(&self) -> Result<Vec<Diagnostic>, CliError> {
        self.config
            .diagnostics
            .iter()
            .map(|d| {
                Ok(match d {
                    DiagnosticConfig::Mmd2 => Diagnostic::Mmd2 { kernel: self.kernel()? },
                    DiagnosticConfig::FisherRao2 => Diagnostic::FisherRao2,
                    DiagnosticConfig::Chi2 => Diagnostic::Chi2,
                    DiagnosticConfig::ReverseChi2 => Diagnostic::ReverseChi2,
                    DiagnosticConfig::Ksd2 => Diagnostic::Ksd2 { kernel: self.kernel()? },
                })
            })
            .collect()
    }

    pub fn output_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.config.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn omega(&self, m: &MeasureConfig) -> Result<GridMeasure, CliError> {
        grid_only(self.measure(m, 0x3)?, "omega")
    }
}

fn grid_only(m: Measure, what: &str) -> Result<GridMeasure, CliError> {
    match m {
        Measure::Grid(g) => Ok(g),
        Measure::Particles(_) => Err(CliError::Config(format!("`{what}` must be a grid measure here"))),
    }
}

fn analytic(m: &MeasureConfig) -> Option<AnalyticDensity> {
    match m {
        MeasureConfig::Gaussian { mean, std, mass } => Some(AnalyticDensity::Gaussian {
            mean: *mean,
            std: *std,
            mass: *mass,
        }),
        MeasureConfig::Uniform { left, right, mass } => Some(AnalyticDensity::Uniform {
            left: *left,
            right: *right,
            mass: *mass,
        }),
        MeasureConfig::Mixture { components } => Some(AnalyticDensity::Mixture {
            components: components.clone(),
        }),
        _ => None,
    }
}

/// One draw from the normalized density.
fn sample(d: &AnalyticDensity, rng: &mut ChaCha8Rng) -> Result<f64, CliError> {
    match d {
        AnalyticDensity::Gaussian { mean, std, .. } => {
            let n = Normal::new(*mean, *std).map_err(|e| CliError::Config(e.to_string()))?;
            Ok(n.sample(rng))
        }
        AnalyticDensity::Uniform { left, right, .. } => Ok(rng.gen_range(*left..*right)),
        AnalyticDensity::Mixture { components } => {
            let total: f64 = components.iter().map(|c| c.weight * c.density.total_mass()).sum();
            if !(total > 0.0) {
                return Err(CliError::Config("mixture has no mass to sample from".into()));
            }
            let mut u = rng.gen_range(0.0..total);
            for c in components {
                u -= c.weight * c.density.total_mass();
                if u < 0.0 {
                    return sample(&c.density, rng);
                }
            }
            sample(&components[components.len() - 1].density, rng)
        }
    }
}
