//! Task runners. Every runner finishes its computation before it touches the
//! output directory, so a failed run leaves no files behind.

use std::fs;
use std::path::{Path, PathBuf};

use kflow::analysis::{gamma_convergence_study, verify_suite, Check};
use kflow::corpus::Corpus;
use kflow::discrepancies as d;
use kflow::flows::{solve_flow, write_trajectory, FlowSpec};
use kflow::geodesics::{fr_geodesic, mmd_geodesic};
use kflow::io::{fmt_g17, write_grid_measure};
use kflow::GridMeasure;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Context, DiscrepancyConfig, GeodesicKind, Task};
use crate::error::CliError;

/// Library errors that point at an unusable combination of settings rather
/// than at the numerics.
pub fn classify(e: kflow::Error) -> CliError {
    use kflow::Error as E;
    match e {
        E::Incompatible(_)
        | E::NotDifferentiable
        | E::IncompatibleGrids
        | E::DimensionMismatch { .. }
        | E::UnequalMass
        | E::InvalidArgument(_)
        | E::InvalidGrid(_)
        | E::InvalidMeasure(_) => CliError::Config(e.to_string()),
        other => CliError::Numerical(other),
    }
}

/// Files produced by a run, relative to its output directory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outcome {
    pub dir: Option<PathBuf>,
    pub files: Vec<String>,
    /// Text meant for stdout.
    pub stdout: String,
}

fn expect_task(ctx: &Context, task: Task) -> Result<(), CliError> {
    if ctx.task() != task {
        return Err(CliError::Config(format!(
            "config describes task {} but subcommand {} was invoked",
            ctx.task().name(),
            task.name()
        )));
    }
    Ok(())
}

pub fn run_flow(ctx: &Context, out: &Path) -> Result<Outcome, CliError> {
    expect_task(ctx, Task::Flow)?;
    let geometry = ctx.geometry()?;
    let energy = ctx.energy()?;
    let initial = ctx.initial()?;
    let time = ctx.time()?;
    let mut spec = FlowSpec::new(geometry, energy, initial, time.t_end, time.dt).with_record_every(time.record_every);
    if let Some(s) = ctx.scheme() {
        spec = spec.with_scheme(s);
    }
    let diagnostics = ctx.diagnostics()?;
    if !diagnostics.is_empty() {
        spec = spec.with_diagnostics(ctx.target()?, diagnostics);
    }
    spec.validate().map_err(classify)?;
    let traj = solve_flow(&spec).map_err(classify)?;
    write_trajectory(&traj, out).map_err(|e| match e {
        kflow::Error::Io(m) => CliError::Io(std::io::Error::other(m)),
        other => classify(other),
    })?;
    let mut files = vec!["diagnostics.csv".to_string()];
    files.extend((0..traj.states.len()).map(|k| format!("state_{k}.csv")));
    Ok(Outcome {
        dir: Some(out.to_path_buf()),
        files,
        stdout: String::new(),
    })
}

pub fn run_geodesic(ctx: &Context, out: &Path) -> Result<Outcome, CliError> {
    expect_task(ctx, Task::Geodesic)?;
    let g = ctx
        .config
        .geodesic
        .ok_or_else(|| CliError::Config("`geodesic` is required for task geodesic".into()))?;
    if g.snapshots == 0 {
        return Err(CliError::Config("geodesic.snapshots must be at least 1".into()));
    }
    let mu0 = ctx.initial_grid()?;
    let mu1 = ctx.target_grid()?;
    mu0.same_grid(&mu1).map_err(classify)?;
    let kernel = match g.kind {
        GeodesicKind::Mmd => Some(ctx.kernel()?),
        GeodesicKind::FisherRao => None,
    };
    let mut summary = String::from("s,mass,distance2_from_start,clipped\n");
    let mut states: Vec<GridMeasure> = Vec::new();
    for j in 0..=g.snapshots {
        let s = j as f64 / g.snapshots as f64;
        let (m, clipped, dist) = match kernel {
            None => {
                let m = fr_geodesic(&mu0, &mu1, s).map_err(classify)?;
                let dist = d::fisher_rao2(&mu0, &m).map_err(classify)?;
                (m, 0, dist)
            }
            Some(k) => {
                let (m, clipped) = mmd_geodesic(&mu0, &mu1, s).map_err(classify)?;
                let dist = d::mmd2(&k, &mu0.clone().into(), &m.clone().into()).map_err(classify)?;
                (m, clipped, dist)
            }
        };
        summary.push_str(&format!(
            "{},{},{},{}\n",
            fmt_g17(s),
            fmt_g17(m.mass()),
            fmt_g17(dist),
            clipped
        ));
        states.push(m);
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("geodesic.csv"), summary)?;
    let mut files = vec!["geodesic.csv".to_string()];
    for (j, m) in states.iter().enumerate() {
        let mut buf = Vec::new();
        write_grid_measure(m, &mut buf).map_err(classify)?;
        let name = format!("state_{j}.csv");
        fs::write(out.join(&name), buf)?;
        files.push(name);
    }
    Ok(Outcome {
        dir: Some(out.to_path_buf()),
        files,
        stdout: String::new(),
    })
}

#[derive(Debug, Clone, Serialize)]
struct Record {
    name: &'static str,
    value: f64,
    meta: Value,
}

fn dual_meta(s: &d::DualSolution, centers: usize) -> Value {
    json!({ "jitter": s.jitter, "escalated": s.escalated, "centers": centers, "lower_bound": true })
}

pub fn run_discrepancy(ctx: &Context, out: &Path) -> Result<Outcome, CliError> {
    expect_task(ctx, Task::Discrepancy)?;
    if ctx.config.discrepancies.is_empty() {
        return Err(CliError::Config("`discrepancies` must list at least one entry".into()));
    }
    let mu = ctx.initial()?;
    let nu = ctx.target()?;
    let grids = || -> Result<(GridMeasure, GridMeasure), CliError> { Ok((ctx.initial_grid()?, ctx.target_grid()?)) };
    let mut records = Vec::new();
    for entry in &ctx.config.discrepancies {
        let rec = match entry {
            DiscrepancyConfig::Mmd2 => {
                let k = ctx.kernel()?;
                Record {
                    name: "mmd2",
                    value: d::mmd2(&k, &mu, &nu).map_err(classify)?,
                    meta: json!({ "kernel": k }),
                }
            }
            DiscrepancyConfig::MmdDual => {
                let k = ctx.kernel()?;
                let (_, s) = d::mmd_dual(&k, &mu, &nu).map_err(classify)?;
                Record {
                    name: "mmd_dual",
                    value: s.value,
                    meta: json!({ "kernel": k, "jitter": s.jitter, "escalated": s.escalated }),
                }
            }
            DiscrepancyConfig::FisherRao2 => {
                let (a, b) = grids()?;
                Record {
                    name: "fisher_rao2",
                    value: d::fisher_rao2(&a, &b).map_err(classify)?,
                    meta: json!({}),
                }
            }
            DiscrepancyConfig::Chi2 => {
                let (a, b) = grids()?;
                Record {
                    name: "chi2",
                    value: d::chi2_divergence(&a, &b).map_err(classify)?,
                    meta: json!({}),
                }
            }
            DiscrepancyConfig::ReverseChi2 => {
                let (a, b) = grids()?;
                Record {
                    name: "reverse_chi2",
                    value: d::chi2_divergence(&b, &a).map_err(classify)?,
                    meta: json!({}),
                }
            }
            DiscrepancyConfig::FlattenedFr2 { omega } => {
                let (a, b) = grids()?;
                let w = ctx.omega(omega)?;
                Record {
                    name: "flattened_fr2",
                    value: d::flattened_fr2(&a, &b, &w).map_err(classify)?,
                    meta: json!({}),
                }
            }
            DiscrepancyConfig::Ksd2 => {
                let k = ctx.kernel()?;
                let (a, b) = grids()?;
                Record {
                    name: "ksd2",
                    value: d::ksd2(&a, &b, &k).map_err(classify)?,
                    meta: json!({ "kernel": k }),
                }
            }
            DiscrepancyConfig::DeStein2 => {
                let k = ctx.kernel()?;
                let c = d::default_centers(&mu, &nu);
                let s = d::de_stein2(&mu, &nu, &k, &c).map_err(classify)?;
                Record {
                    name: "de_stein2",
                    value: s.value,
                    meta: dual_meta(&s, c.len()),
                }
            }
            DiscrepancyConfig::DWfr2 => {
                let k = ctx.kernel()?;
                let c = d::default_centers(&mu, &nu);
                let s = d::d_wfr2(&mu, &nu, &k, &c).map_err(classify)?;
                Record {
                    name: "d_wfr2",
                    value: s.value,
                    meta: dual_meta(&s, c.len()),
                }
            }
            DiscrepancyConfig::Ksf2 { a } => {
                let k = ctx.kernel()?;
                let c = d::default_centers(&mu, &nu);
                let s = d::ksf2(&mu, &nu, &k, *a, &c).map_err(classify)?;
                let mut meta = dual_meta(&s, c.len());
                meta["a"] = json!(a);
                Record {
                    name: "ksf2",
                    value: s.value,
                    meta,
                }
            }
            DiscrepancyConfig::MmdFr2 { lambda } => {
                let k = ctx.kernel()?;
                let (a, b) = grids()?;
                Record {
                    name: "mmd_fr2",
                    value: d::mmd_fr2(&a, &b, &k, *lambda).map_err(classify)?,
                    meta: json!({ "lambda": lambda }),
                }
            }
            DiscrepancyConfig::FlatW2 { omega } => {
                let (a, b) = grids()?;
                let w = ctx.omega(omega)?;
                Record {
                    name: "flat_w2",
                    value: d::flat_w2(&a, &b, &w).map_err(classify)?,
                    meta: json!({}),
                }
            }
            DiscrepancyConfig::FlatW2Dual { omega } => {
                let (a, b) = grids()?;
                let w = ctx.omega(omega)?;
                let s = d::flat_w2_dual(&a, &b, &w).map_err(classify)?;
                Record {
                    name: "flat_w2_dual",
                    value: s.value,
                    meta: json!({ "jitter": s.jitter, "escalated": s.escalated }),
                }
            }
        };
        records.push(rec);
    }
    let text = serde_json::to_string_pretty(&records).expect("records serialize") + "\n";
    fs::create_dir_all(out)?;
    fs::write(out.join("discrepancies.json"), &text)?;
    Ok(Outcome {
        dir: Some(out.to_path_buf()),
        files: vec!["discrepancies.json".into()],
        stdout: text,
    })
}

#[derive(Debug, Serialize)]
struct VerifyReport<'a> {
    seed: u64,
    passed: bool,
    checks: &'a [Check],
}

/// Runs the identity suite on the seeded corpus. Returns the outcome and
/// whether every check passed.
pub fn run_verify(seed: u64, out: &Path) -> Result<(Outcome, bool), CliError> {
    let checks = verify_suite(&Corpus::new(seed)).map_err(CliError::Numerical)?;
    let passed = checks.iter().all(|c| c.passed);
    let report = VerifyReport {
        seed,
        passed,
        checks: &checks,
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    fs::create_dir_all(out)?;
    fs::write(out.join("verify_report.json"), &text)?;
    let mut lines = String::new();
    for c in &checks {
        lines.push_str(&format!(
            "{} {} (cases {}, max defect {:e}, tolerance {:e})\n",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.cases,
            c.max_defect,
            c.tolerance
        ));
    }
    Ok((
        Outcome {
            dir: Some(out.to_path_buf()),
            files: vec!["verify_report.json".into()],
            stdout: lines,
        },
        passed,
    ))
}

pub fn run_study_gamma(ctx: &Context, out: &Path) -> Result<Outcome, CliError> {
    expect_task(ctx, Task::StudyGamma)?;
    let study = ctx
        .config
        .study
        .as_ref()
        .ok_or_else(|| CliError::Config("`study` is required for task study_gamma".into()))?;
    let energy = ctx.energy()?;
    let mu0 = ctx.initial_grid()?;
    let kernel = ctx.kernel()?;
    let time = ctx.time()?;
    let rows = gamma_convergence_study(
        &energy,
        &mu0,
        &kernel,
        &study.lambdas,
        time.t_end,
        time.dt,
        time.record_every,
    )
    .map_err(classify)?;
    let mut csv = String::from("lambda,sup_error,dissipation_lambda,dissipation_fr,edp_defect_lambda,edp_defect_fr\n");
    for r in &rows {
        let fields = [
            r.lambda,
            r.sup_error,
            r.dissipation_lambda,
            r.dissipation_fr,
            r.edp_defect_lambda,
            r.edp_defect_fr,
        ];
        csv.push_str(&fields.iter().map(|v| fmt_g17(*v)).collect::<Vec<_>>().join(","));
        csv.push('\n');
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("gamma_study.csv"), csv)?;
    Ok(Outcome {
        dir: Some(out.to_path_buf()),
        files: vec!["gamma_study.csv".into()],
        stdout: String::new(),
    })
}
