//! The four subcommands and the library-level runs behind them.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::config::{resolve_problem, ConfigError, ResolvedProblem, SnapshotFormat, SolverBlock, SweepBlock};
use super::report::{ConvergenceReport, ConvergenceRow};
use super::{ensure_dir, io_err, CliError, LoadedConfig, Manifest};
use crate::grid::{eval_field, snap_intervals, Snapshot};
use crate::mc_oracle::{mc_estimate, OracleError, PathConfig};
use crate::problem::ProblemSpec;
use crate::stepper::{solve, SnapshotRecorder, Solver, SolverConfig, StepState};

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| ConfigError::new(format!("cannot start {n} threads: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn write_snapshot(dir: &Path, stem: &str, snapshot: &Snapshot, formats: &[SnapshotFormat]) -> Result<Vec<String>, CliError> {
    let mut names = Vec::new();
    for format in formats {
        let name = match format {
            SnapshotFormat::Binary => format!("{stem}.jksnap"),
            SnapshotFormat::Csv => format!("{stem}.csv"),
        };
        let path = dir.join(&name);
        let w = create(&path)?;
        match format {
            SnapshotFormat::Binary => snapshot.write_binary(w).map_err(io_err(&path))?,
            SnapshotFormat::Csv => snapshot.write_csv(w)?,
        }
        names.push(name);
    }
    Ok(names)
}

fn snapshot_stem(time: f64) -> String {
    format!("snapshot_t{time:.6}")
}

#[derive(Debug, Clone, Serialize)]
struct SolveResolved {
    problem: ResolvedProblem,
    solver: SolverConfig,
    steps: usize,
    boundary_layer_nodes: usize,
    l2_error: Option<f64>,
}

/// Solve once; write snapshots and a manifest.
pub fn cmd_solve(loaded: &LoadedConfig, out: &Path, threads: Option<usize>) -> Result<(), CliError> {
    let cfg = &loaded.config;
    let problem = cfg.resolve_problem()?;
    let solver_cfg = cfg.solver.resolve(&problem.spec, None, None, None)?;
    ensure_dir(out)?;
    let started = Instant::now();
    let horizon = problem.spec.horizon();
    let times = if cfg.output.snapshot_times.is_empty() {
        vec![horizon]
    } else {
        cfg.output.snapshot_times.clone()
    };
    let (solver, state, recorder) = with_threads(threads, || -> Result<_, CliError> {
        let solver = Solver::new(&problem.spec, &solver_cfg)?;
        let mut recorder = SnapshotRecorder::new(times, solver_cfg.dt);
        let state = solver.run(&mut [&mut recorder])?;
        Ok((solver, state, recorder))
    })??;
    let l2_error = problem.spec.exact().map(|exact| solver.l2_error(&state, exact));
    let mut artifacts = Vec::new();
    for snap in &recorder.snapshots {
        artifacts.extend(write_snapshot(out, &snapshot_stem(snap.time), snap, &cfg.output.formats)?);
    }
    let wall_time = started.elapsed().as_secs_f64();
    println!(
        "{}: {} steps to t = {}, {} snapshot file(s) in {}{}",
        problem.preset,
        solver.steps(),
        state.time,
        artifacts.len(),
        out.display(),
        l2_error.map_or(String::new(), |e| format!(", L2 error {e:.6e}"))
    );
    Manifest {
        command: "solve".into(),
        version: super::VERSION,
        config_path: loaded.path.clone(),
        config: cfg.clone(),
        threads,
        wall_time,
        artifacts,
        resolved: SolveResolved {
            boundary_layer_nodes: solver.boundary_layer_nodes(),
            steps: solver.steps(),
            problem,
            solver: solver_cfg,
            l2_error,
        },
    }
    .write(out)
}

/// Solver settings for one sweep row.
pub fn sweep_config(spec: &ProblemSpec, solver: &SolverBlock, sweep: &SweepBlock, dt: f64) -> Result<SolverConfig, ConfigError> {
    let domain = spec.domain();
    let target = sweep.c_x * dt.powf(sweep.alpha);
    let intervals = (0..domain.dim())
        .map(|a| snap_intervals(domain.extent(a), target, domain.modes()[a].is_periodic()))
        .collect();
    let h = sweep.c_h * dt.powf(sweep.beta);
    solver.resolve(spec, Some(dt), Some(intervals), Some(h))
}

/// Solve one row and measure the error at the final time.
pub fn sweep_row(spec: &ProblemSpec, config: &SolverConfig, relative: bool) -> Result<ConvergenceRow, CliError> {
    let exact = spec
        .exact()
        .ok_or_else(|| ConfigError::new("convergence sweeps need a problem with a known solution"))?;
    let started = Instant::now();
    let solver = Solver::new(spec, config)?;
    let state = solver.run(&mut [])?;
    let mut error = solver.l2_error(&state, exact);
    if relative {
        error /= solver.l2_norm(state.time, exact);
    }
    Ok(ConvergenceRow {
        dt: config.dt,
        dx: solver.grid().spacing()[0],
        h: config.jump_h,
        m: config.gh_points,
        l2_error: error,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

/// Run a whole sweep. Rows stop at the first failure, which is returned
/// alongside the partial (incomplete) report.
pub fn run_sweep(
    spec: &ProblemSpec,
    solver: &SolverBlock,
    sweep: &SweepBlock,
) -> Result<(ConvergenceReport, Vec<SolverConfig>, Option<CliError>), ConfigError> {
    let configs = sweep
        .dt
        .iter()
        .map(|&dt| sweep_config(spec, solver, sweep, dt))
        .collect::<Result<Vec<_>, _>>()?;
    let results: Vec<Result<ConvergenceRow, CliError>> = if sweep.parallel_rows {
        configs.par_iter().map(|c| sweep_row(spec, c, sweep.relative)).collect()
    } else {
        let mut results = Vec::new();
        for c in &configs {
            let r = sweep_row(spec, c, sweep.relative);
            let failed = r.is_err();
            results.push(r);
            if failed {
                break;
            }
        }
        results
    };
    let mut report = ConvergenceReport::new(sweep.relative);
    let mut failure = None;
    for r in results {
        match r {
            Ok(row) if failure.is_none() => report.rows.push(row),
            Ok(_) => {}
            Err(e) => {
                report.complete = false;
                failure.get_or_insert(e);
            }
        }
    }
    Ok((report, configs, failure))
}

#[derive(Debug, Clone, Serialize)]
struct ConvergeResolved {
    problem: ResolvedProblem,
    sweep: SweepBlock,
    rows: Vec<SolverConfig>,
    rate: Option<f64>,
    pairwise_rates: Vec<f64>,
    complete: bool,
}

/// Convergence sweep: `convergence.csv`, a table on stdout, a manifest.
pub fn cmd_converge(loaded: &LoadedConfig, out: &Path, threads: Option<usize>) -> Result<ConvergenceReport, CliError> {
    let cfg = &loaded.config;
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| ConfigError::new("converge needs a [sweep] table"))?;
    let problem = cfg.resolve_problem()?;
    if problem.spec.exact().is_none() {
        return Err(ConfigError::new(format!("preset `{}` has no exact solution to compare against", problem.preset)).into());
    }
    ensure_dir(out)?;
    let started = Instant::now();
    let (report, configs, failure) = with_threads(threads, || run_sweep(&problem.spec, &cfg.solver, sweep))??;
    let csv_path = out.join("convergence.csv");
    report.write_csv(create(&csv_path)?)?;
    print!("{}", report.table());
    Manifest {
        command: "converge".into(),
        version: super::VERSION,
        config_path: loaded.path.clone(),
        config: cfg.clone(),
        threads,
        wall_time: started.elapsed().as_secs_f64(),
        artifacts: vec!["convergence.csv".into()],
        resolved: ConvergeResolved {
            problem,
            sweep: sweep.clone(),
            rows: configs,
            rate: report.rate(),
            pairwise_rates: report.pairwise_rates(),
            complete: report.complete,
        },
    }
    .write(out)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// `u` on the `(φ, θ)` nodes of one minor-radius plane.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneField {
    pub time: f64,
    pub r: f64,
    /// `(φ, θ, u)` rows, `θ` fastest.
    pub values: Vec<[f64; 3]>,
}

impl PlaneField {
    pub fn peak(&self) -> f64 {
        self.values.iter().map(|v| v[2]).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Output of one torus run.
#[derive(Debug, Clone)]
pub struct PlasmaCase {
    pub kappa2: f64,
    pub snapshots: Vec<Snapshot>,
    pub planes: Vec<PlaneField>,
    /// `(t, r, u)` at the profile point, every step.
    pub profile: Vec<[f64; 3]>,
    /// `(t, r, peak)` for every tracked plane, every step.
    pub peaks: Vec<[f64; 3]>,
    pub wall_time: f64,
}

fn plane_field(state: &StepState, r: f64) -> Result<PlaneField, CliError> {
    let grid = state.field.grid();
    let (phi, theta) = (&grid.axes()[0], &grid.axes()[1]);
    let mut values = Vec::with_capacity(phi.nodes * theta.nodes);
    for i in 0..phi.nodes {
        for j in 0..theta.nodes {
            let x = [phi.coordinate(i), theta.coordinate(j), r];
            let u = state.field.interpolate(&x).map_err(crate::stepper::SolverError::from)?;
            values.push([x[0], x[1], u]);
        }
    }
    Ok(PlaneField {
        time: state.time,
        r,
        values,
    })
}

/// Run the torus problem, tracking planes, the radial profile and snapshots.
pub fn run_plasma_case(
    spec: &ProblemSpec,
    config: &SolverConfig,
    snapshot_times: &[f64],
    r_planes: &[f64],
    profile_point: [f64; 2],
    kappa2: f64,
) -> Result<PlasmaCase, CliError> {
    let started = Instant::now();
    let solver = Solver::new(spec, config)?;
    let mut recorder = SnapshotRecorder::new(snapshot_times.to_vec(), config.dt);
    let mut planes = Vec::new();
    let mut profile = Vec::new();
    let mut peaks = Vec::new();
    let mut failure: Option<CliError> = None;
    let tol = 0.5 * config.dt;
    let mut track = |state: &StepState| {
        if failure.is_some() {
            return;
        }
        let grid = state.field.grid();
        let r_axis = &grid.axes()[2];
        for k in 0..r_axis.nodes {
            let r = r_axis.coordinate(k);
            match state.field.interpolate(&[profile_point[0], profile_point[1], r]) {
                Ok(u) => profile.push([state.time, r, u]),
                Err(e) => failure = Some(crate::stepper::SolverError::from(e).into()),
            }
        }
        let keep = snapshot_times.iter().any(|t| (t - state.time).abs() < tol);
        for &r in r_planes {
            match plane_field(state, r) {
                Ok(p) => {
                    peaks.push([state.time, r, p.peak()]);
                    if keep {
                        planes.push(p);
                    }
                }
                Err(e) => failure = Some(e),
            }
        }
    };
    solver.run(&mut [&mut recorder, &mut track])?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(PlasmaCase {
        kappa2,
        snapshots: recorder.snapshots,
        planes,
        profile,
        peaks,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

fn write_rows(path: &Path, header: &[&str], rows: &[[f64; 3]]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Debug, Clone, Serialize)]
struct PlasmaResolved {
    cases: Vec<PlasmaCaseManifest>,
}

#[derive(Debug, Clone, Serialize)]
struct PlasmaCaseManifest {
    kappa2: f64,
    directory: String,
    problem: ResolvedProblem,
    solver: SolverConfig,
    wall_time: f64,
    final_peaks: Vec<[f64; 2]>,
}

/// Torus sweep over `plasma.kappa2`; one subdirectory per value.
pub fn cmd_plasma(loaded: &LoadedConfig, out: &Path, threads: Option<usize>) -> Result<Vec<PlasmaCase>, CliError> {
    let cfg = &loaded.config;
    if cfg.problem.preset != "plasma-torus" {
        return Err(ConfigError::new(format!("plasma needs preset `plasma-torus`, got `{}`", cfg.problem.preset)).into());
    }
    let block = cfg.plasma.clone().unwrap_or_default();
    ensure_dir(out)?;
    let started = Instant::now();
    let mut cases = Vec::new();
    let mut manifests = Vec::new();
    let mut artifacts = Vec::new();
    for &kappa2 in &block.kappa2 {
        let problem = resolve_problem(&cfg.problem, Some(kappa2))?;
        let solver_cfg = cfg.solver.resolve(&problem.spec, None, None, None)?;
        let horizon = problem.spec.horizon();
        let times = if cfg.output.snapshot_times.is_empty() {
            vec![0.0, horizon]
        } else {
            cfg.output.snapshot_times.clone()
        };
        let case = with_threads(threads, || {
            run_plasma_case(&problem.spec, &solver_cfg, &times, &block.r_planes, block.profile_point, kappa2)
        })??;
        let dir_name = format!("kappa2_{kappa2}");
        let dir = out.join(&dir_name);
        ensure_dir(&dir)?;
        for snap in &case.snapshots {
            for name in write_snapshot(&dir, &snapshot_stem(snap.time), snap, &cfg.output.formats)? {
                artifacts.push(format!("{dir_name}/{name}"));
            }
        }
        for plane in &case.planes {
            let name = format!("plane_r{}_t{:.6}.csv", plane.r, plane.time);
            write_rows(&dir.join(&name), &["phi", "theta", "u"], &plane.values)?;
            artifacts.push(format!("{dir_name}/{name}"));
        }
        write_rows(&dir.join("r_profile.csv"), &["t", "r", "u"], &case.profile)?;
        write_rows(&dir.join("peaks.csv"), &["t", "r", "peak"], &case.peaks)?;
        artifacts.push(format!("{dir_name}/r_profile.csv"));
        artifacts.push(format!("{dir_name}/peaks.csv"));
        let final_time = case.peaks.last().map_or(0.0, |p| p[0]);
        let final_peaks: Vec<[f64; 2]> = case
            .peaks
            .iter()
            .filter(|p| p[0] == final_time)
            .map(|p| [p[1], p[2]])
            .collect();
        for p in &final_peaks {
            println!("kappa2 = {kappa2}: peak at r = {} and t = {final_time}: {:.6e}", p[0], p[1]);
        }
        manifests.push(PlasmaCaseManifest {
            kappa2,
            directory: dir_name,
            problem,
            solver: solver_cfg,
            wall_time: case.wall_time,
            final_peaks,
        });
        cases.push(case);
    }
    Manifest {
        command: "plasma".into(),
        version: super::VERSION,
        config_path: loaded.path.clone(),
        config: cfg.clone(),
        threads,
        wall_time: started.elapsed().as_secs_f64(),
        artifacts,
        resolved: PlasmaResolved { cases: manifests },
    }
    .write(out)?;
    Ok(cases)
}

/// Scheme value against a Monte Carlo estimate at one probe point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub probe: usize,
    pub x: Vec<f64>,
    pub scheme: f64,
    pub mc_mean: f64,
    pub std_error: f64,
    pub z: f64,
    /// `|z| > 3`.
    pub flagged: bool,
}

fn z_score(diff: f64, se: f64) -> f64 {
    if se > 0.0 {
        diff / se
    } else if diff == 0.0 {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    }
}

fn oracle_error(e: OracleError) -> CliError {
    match e {
        OracleError::Config(_) | OracleError::NonlinearForcing { .. } => ConfigError::new(e.to_string()).into(),
        e => e.into(),
    }
}

/// Solve to the horizon, then estimate `u(T, x)` by Monte Carlo at every probe.
pub fn compare_with_oracle(
    spec: &ProblemSpec,
    config: &SolverConfig,
    probes: &[Vec<f64>],
    paths: &PathConfig,
) -> Result<Vec<ComparisonRow>, CliError> {
    if let Some(p) = probes.iter().find(|p| p.len() != spec.dim()) {
        return Err(ConfigError::new(format!("probe {p:?} does not have {} coordinates", spec.dim())).into());
    }
    let solution = solve(spec, config, &mut [])?;
    let t = solution.state.time;
    let volume = |t: f64, x: &[f64]| spec.volume(t, x);
    let mut rows = Vec::with_capacity(probes.len());
    for (i, x) in probes.iter().enumerate() {
        let scheme = eval_field(&solution.state.field, &volume, t, x);
        let est = mc_estimate(spec, t, x, paths).map_err(oracle_error)?;
        let z = z_score(scheme - est.mean, est.std_error);
        rows.push(ComparisonRow {
            probe: i,
            x: x.clone(),
            scheme,
            mc_mean: est.mean,
            std_error: est.std_error,
            z,
            flagged: z.abs() > 3.0,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
struct CompareResolved {
    problem: ResolvedProblem,
    solver: SolverConfig,
    paths: PathConfig,
    seed: u64,
    flagged: usize,
}

/// Scheme versus Monte Carlo at the configured probes: `comparison.csv`.
pub fn cmd_mc_compare(loaded: &LoadedConfig, out: &Path, threads: Option<usize>) -> Result<Vec<ComparisonRow>, CliError> {
    let cfg = &loaded.config;
    let mc = cfg
        .mc
        .as_ref()
        .ok_or_else(|| ConfigError::new("mc-compare needs an [mc] table"))?;
    let problem = cfg.resolve_problem()?;
    let solver_cfg = cfg.solver.resolve(&problem.spec, None, None, None)?;
    let paths = PathConfig {
        n_paths: mc.n_paths,
        euler_dt: mc.euler_dt.unwrap_or(solver_cfg.dt / 8.0),
        seed: mc.seed,
        antithetic: mc.antithetic,
    };
    ensure_dir(out)?;
    let started = Instant::now();
    let rows = with_threads(threads, || compare_with_oracle(&problem.spec, &solver_cfg, &mc.probes, &paths))??;
    let path = out.join("comparison.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    let d = problem.spec.dim();
    let mut header: Vec<String> = vec!["probe".into()];
    header.extend((0..d).map(|a| format!("x{a}")));
    header.extend(["scheme", "mc_mean", "std_error", "z", "flagged"].map(String::from));
    w.write_record(&header)?;
    println!("{:>5} {:>28} {:>14} {:>14} {:>11} {:>8}", "probe", "x", "scheme", "mc_mean", "std_error", "z");
    for r in &rows {
        let mut rec = vec![r.probe.to_string()];
        rec.extend(r.x.iter().map(|v| v.to_string()));
        rec.extend([r.scheme, r.mc_mean, r.std_error, r.z].map(|v| v.to_string()));
        rec.push(r.flagged.to_string());
        w.write_record(&rec)?;
        println!(
            "{:>5} {:>28} {:>14.8} {:>14.8} {:>11.3e} {:>8.3}{}",
            r.probe,
            format!("{:?}", r.x),
            r.scheme,
            r.mc_mean,
            r.std_error,
            r.z,
            if r.flagged { "  |z| > 3" } else { "" }
        );
    }
    w.flush().map_err(io_err(&path))?;
    let flagged = rows.iter().filter(|r| r.flagged).count();
    println!("{flagged} of {} probe(s) flagged", rows.len());
    Manifest {
        command: "mc-compare".into(),
        version: super::VERSION,
        config_path: loaded.path.clone(),
        config: cfg.clone(),
        threads,
        wall_time: started.elapsed().as_secs_f64(),
        artifacts: vec!["comparison.csv".into()],
        resolved: CompareResolved {
            problem,
            solver: solver_cfg,
            seed: paths.seed,
            paths,
            flagged,
        },
    }
    .write(out)?;
    Ok(rows)
}
