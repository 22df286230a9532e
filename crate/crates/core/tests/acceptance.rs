//! Acceptance runs.
//!
//! One test per criterion. Each prints a `PASS`/`FAIL` line (written straight
//! to stdout so it survives output capture) and then asserts. Runs are
//! serialized so that the wall-clock budgets are measured without contention.

use std::f64::consts::PI;
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use jumpkac::cli::commands::{compare_with_oracle, run_plasma_case, run_sweep, PlasmaCase};
use jumpkac::cli::{ConvergenceReport, RunConfig};
use jumpkac::grid::{eval_field, AxisMode, BoxDomain, Interpolant, Side, TensorGrid};
use jumpkac::mc_oracle::PathConfig;
use jumpkac::problem::presets::{self, PlasmaParams};
use jumpkac::problem::ProblemBuilder;
use jumpkac::quadrature::{gauss_hermite, jump_rule, jump_rule_cut_cells, JumpKernel, NormalizedKernel, Renormalize};
use jumpkac::stepper::{solve, Solver, SolverConfig};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn verdict(criterion: &str, ok: bool, detail: &str) {
    say(&format!("{} [{criterion}] {detail}", if ok { "PASS" } else { "FAIL" }));
}

fn load(name: &str) -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    RunConfig::from_toml(&text).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn sweep(name: &str) -> ConvergenceReport {
    let cfg = load(name);
    let problem = cfg.resolve_problem().unwrap();
    let (report, _, failure) = run_sweep(&problem.spec, &cfg.solver, cfg.sweep.as_ref().unwrap()).unwrap();
    if let Some(e) = failure {
        panic!("{name}: {e}");
    }
    say(&format!("{name}\n{}", report.table().trim_end()));
    report
}

fn in_band(rate: Option<f64>, lo: f64, hi: f64) -> bool {
    rate.is_some_and(|r| (lo..=hi).contains(&r))
}

fn show(rate: Option<f64>) -> String {
    rate.map_or("n/a".into(), |r| format!("{r:.4}"))
}

#[test]
fn criterion_1_first_order_in_time() {
    let _guard = serial();
    let started = Instant::now();
    let rate = sweep("converge_m2.toml").rate();
    let ok = in_band(rate, 0.8, 1.2);
    verdict(
        "1",
        ok,
        &format!(
            "example 1, M = 2, dx ~ dt^1/2, h ~ dt^1/2: rate {} in [0.8, 1.2] ({:.1} s)",
            show(rate),
            started.elapsed().as_secs_f64()
        ),
    );
    assert!(ok, "rate {rate:?}");
}

#[test]
fn criterion_2_degraded_spatial_scalings() {
    let _guard = serial();
    let third = sweep("converge_alpha_third.toml").rate();
    let one = sweep("converge_alpha_one.toml").rate();
    let ok_third = in_band(third, 0.23, 0.47);
    let ok_one = in_band(one, 0.35, 0.65);
    verdict(
        "2",
        ok_third && ok_one,
        &format!(
            "dx ~ dt^1/3: rate {} in [0.23, 0.47] {}; dx ~ dt: rate {} in [0.35, 0.65] {}",
            show(third),
            if ok_third { "ok" } else { "missed" },
            show(one),
            if ok_one { "ok" } else { "missed" }
        ),
    );
    assert!(ok_third, "alpha = 1/3 rate {third:?}");
    assert!(ok_one, "alpha = 1 rate {one:?}");
}

#[test]
fn criterion_3_quadrature_order() {
    let _guard = serial();
    let m1 = sweep("converge_m1.toml");
    let m3 = sweep("converge_m3.toml").rate();
    let quarter = sweep("converge_beta_quarter.toml").rate();
    let ok_m1 = m1.rate().is_some_and(|r| r <= 0.1);
    let ok_m3 = in_band(m3, 0.8, 1.2);
    let ok_quarter = in_band(quarter, 0.35, 0.65);
    verdict(
        "3",
        ok_m1 && ok_m3 && ok_quarter,
        &format!(
            "M = 1: rate {} <= 0.1 (errors non-decreasing: {}); M = 3: rate {} in [0.8, 1.2]; h ~ dt^1/4: rate {} in [0.35, 0.65]",
            show(m1.rate()),
            m1.non_decreasing(),
            show(m3),
            show(quarter)
        ),
    );
    assert!(ok_m1, "M = 1 rate {:?}", m1.rate());
    assert!(ok_m3, "M = 3 rate {m3:?}");
    assert!(ok_quarter, "beta = 1/4 rate {quarter:?}");
}

#[test]
fn criterion_4_scheme_matches_monte_carlo() {
    let _guard = serial();
    let cfg = load("mc_jump1d.toml");
    let problem = cfg.resolve_problem().unwrap();
    let solver = cfg.solver.resolve(&problem.spec, None, None, None).unwrap();
    let mc = cfg.mc.clone().unwrap();
    assert_eq!(mc.probes.len(), 5);
    assert_eq!(mc.n_paths, 100_000);
    let paths = PathConfig {
        n_paths: mc.n_paths,
        euler_dt: mc.euler_dt.unwrap_or(solver.dt / 8.0),
        seed: mc.seed,
        antithetic: mc.antithetic,
    };
    let started = Instant::now();
    let rows = compare_with_oracle(&problem.spec, &solver, &mc.probes, &paths).unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    for r in &rows {
        say(&format!(
            "  x = {:.2}: scheme {:.6}, mc {:.6} +- {:.2e}, z = {:+.3}",
            r.x[0], r.scheme, r.mc_mean, r.std_error, r.z
        ));
    }
    let worst = rows.iter().map(|r| r.z.abs()).fold(0.0, f64::max);
    let ok = rows.iter().all(|r| !r.flagged) && elapsed <= 120.0;
    verdict(
        "4",
        ok,
        &format!("jump-1d, 5 probes, 1e5 paths: max |z| = {worst:.3} <= 3, {elapsed:.1} s <= 120 s"),
    );
    assert!(ok, "max |z| {worst}, {elapsed} s");
}

fn gaussian_moment(k: u32) -> f64 {
    if k % 2 == 1 {
        0.0
    } else {
        (1..k).step_by(2).map(|j| j as f64).product::<f64>() * 0.5f64.powi(k as i32 / 2)
    }
}

fn gh_moments() -> Result<(), String> {
    for m in 1..=5 {
        let rule = gauss_hermite(m, 1).map_err(|e| e.to_string())?;
        for k in 0..(2 * m as u32) {
            let got = rule.integrate(|x| x[0].powi(k as i32));
            let want = gaussian_moment(k);
            if (got - want).abs() > 1e-12 * want.max(1.0) {
                return Err(format!("M = {m}, degree {k}: {got} vs {want}"));
            }
        }
    }
    Ok(())
}

fn jump_constants() -> Result<(), String> {
    let ball = NormalizedKernel::from_kernel(JumpKernel::uniform_ball(3, 0.3, 2.0).unwrap(), 16).unwrap();
    let torus = NormalizedKernel::from_kernel(presets::von_mises_kernel(20.0, 1.0, PI / 6.0, 128), 64).unwrap();
    let rules = [
        ("ball lattice", jump_rule(&ball, 0.1)),
        ("ball cut cells", jump_rule_cut_cells(&ball, 0.07, 8, Renormalize::Yes)),
        ("von Mises lattice", jump_rule(&torus, PI / 16.0)),
    ];
    for (name, rule) in rules {
        let rule = rule.map_err(|e| e.to_string())?;
        let sum = rule.integrate(|_| 1.0);
        if (sum - 1.0).abs() > 1e-14 {
            return Err(format!("{name}: weights sum to {sum}"));
        }
    }
    Ok(())
}

fn cubic_reproduction() -> Result<(), String> {
    let domain = BoxDomain::volume_box(vec![0.0, -1.0, 0.5], vec![1.0, 1.0, 2.0]).unwrap();
    let grid = Arc::new(TensorGrid::with_intervals(&domain, &[6, 5, 7]).unwrap());
    let p = |x: &[f64]| x[0].powi(3) * x[1] * x[1] - 2.0 * x[1].powi(3) * x[2] + x[0] * x[1] * x[2].powi(3) + 0.5;
    let interp = Interpolant::from_fn(grid, p);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..500 {
        let x = [rng.random_range(0.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.5..2.0)];
        let got = interp.interpolate(&x).map_err(|e| e.to_string())?;
        if (got - p(&x)).abs() > 1e-10 {
            return Err(format!("at {x:?}: {got} vs {}", p(&x)));
        }
    }
    Ok(())
}

fn constant_preservation() -> Result<(), String> {
    let k = -0.8;
    let domain = BoxDomain::volume_box(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
    let spec = ProblemBuilder::new(domain, 50.0 / 32.0)
        .constant_drift(vec![0.3, -0.2])
        .constant_sigma(vec![0.4, 0.7])
        .kernel(JumpKernel::uniform_ball(2, 0.3, 5.0).unwrap())
        .initial(move |_| k)
        .volume(move |_, _| k)
        .build()
        .unwrap();
    let config = SolverConfig::new(1.0 / 32.0, vec![10, 10], 2, 0.1);
    let solver = Solver::new(&spec, &config).map_err(|e| e.to_string())?;
    if solver.steps() != 50 {
        return Err(format!("{} steps", solver.steps()));
    }
    let state = solver.run(&mut []).map_err(|e| e.to_string())?;
    let worst = state.field.values().iter().map(|v| (v - k).abs()).fold(0.0, f64::max);
    if worst > 10.0 * config.newton_tol {
        return Err(format!("drift {worst:e}"));
    }
    Ok(())
}

fn equivariance() -> Result<(), String> {
    let domain = BoxDomain::new(
        vec![0.0, 0.0, 0.0],
        vec![2.0 * PI, 2.0 * PI, 0.5],
        vec![
            AxisMode::Periodic,
            AxisMode::Periodic,
            AxisMode::Bounded {
                lower: Side::Reflect,
                upper: Side::Volume,
            },
        ],
    )
    .unwrap();
    let grid = Arc::new(TensorGrid::with_intervals(&domain, &[16, 12, 9]).unwrap());
    let interp = Interpolant::from_fn(grid, |x| (x[0]).sin() * (2.0 * x[1]).cos() + (x[2] * x[2] - 0.25) * x[0].cos());
    let volume = |_: f64, _: &[f64]| 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let x = [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..0.45)];
        let u = eval_field(&interp, &volume, 0.0, &x);
        for shifted in [
            [x[0] + 2.0 * PI, x[1], x[2]],
            [x[0], x[1] - 4.0 * PI, x[2]],
            [x[0], x[1], -x[2]],
        ] {
            let v = eval_field(&interp, &volume, 0.0, &shifted);
            if (u - v).abs() > 1e-12 {
                return Err(format!("{x:?} vs {shifted:?}: {u} vs {v}"));
            }
        }
    }
    Ok(())
}

fn determinism() -> Result<(), String> {
    let spec = presets::example1(0.3).with_horizon(0.25).unwrap();
    let mut config = SolverConfig::new(1.0 / 16.0, vec![8, 8, 8], 2, 0.25);
    config.jump_cut_cells = 4;
    let bits = |threads: usize| -> Result<Vec<u64>, String> {
        let mut c = config.clone();
        c.threads = Some(threads);
        let s = solve(&spec, &c, &mut []).map_err(|e| e.to_string())?;
        Ok(s.state.field.values().iter().map(|v| v.to_bits()).collect())
    };
    let one = bits(1)?;
    for n in [2, 4] {
        if bits(n)? != one {
            return Err(format!("1 and {n} workers differ"));
        }
    }
    Ok(())
}

#[test]
fn criterion_5_property_suite() {
    let _guard = serial();
    let checks: [(&str, fn() -> Result<(), String>); 6] = [
        ("Gauss-Hermite moments through degree 2M-1, M = 1..5", gh_moments),
        ("jump rules integrate constants exactly", jump_constants),
        ("tricubic interpolation reproduces cubics to 1e-10", cubic_reproduction),
        ("constant solution kept over 50 steps to 10 newton_tol", constant_preservation),
        ("periodic and reflect equivariance", equivariance),
        ("bit-identical results at 1, 2 and 4 workers", determinism),
    ];
    let mut failed = Vec::new();
    for (name, check) in checks {
        match check() {
            Ok(()) => say(&format!("  ok   {name}")),
            Err(e) => {
                say(&format!("  fail {name}: {e}"));
                failed.push(name);
            }
        }
    }
    verdict("5", failed.is_empty(), &format!("property suite: {} of 6 checks failed", failed.len()));
    assert!(failed.is_empty(), "{failed:?}");
}

fn plasma_runs(name: &str) -> (Vec<PlasmaCase>, f64) {
    let cfg = load(name);
    let block = cfg.plasma.clone().unwrap();
    let started = Instant::now();
    let mut cases = Vec::new();
    for &kappa2 in &block.kappa2 {
        let problem = jumpkac::cli::config::resolve_problem(&cfg.problem, Some(kappa2)).unwrap();
        let solver = cfg.solver.resolve(&problem.spec, None, None, None).unwrap();
        let case = run_plasma_case(
            &problem.spec,
            &solver,
            &cfg.output.snapshot_times,
            &block.r_planes,
            block.profile_point,
            kappa2,
        )
        .unwrap();
        cases.push(case);
    }
    (cases, started.elapsed().as_secs_f64())
}

fn exchange_asymmetry(snapshot: &jumpkac::grid::Snapshot) -> f64 {
    let [nphi, ntheta, nr] = [snapshot.counts[0], snapshot.counts[1], snapshot.counts[2]];
    assert_eq!(nphi, ntheta);
    let at = |i: usize, j: usize, k: usize| snapshot.values[(i * ntheta + j) * nr + k];
    let mut worst = 0.0f64;
    for i in 0..nphi {
        for j in 0..ntheta {
            for k in 0..nr {
                worst = worst.max((at(i, j, k) - at(j, i, k)).abs());
            }
        }
    }
    worst
}

#[test]
fn criterion_6_plasma_scenario() {
    let _guard = serial();
    let (cases, elapsed) = plasma_runs("plasma.toml");
    let strong = cases.iter().find(|c| c.kappa2 == 20.0).unwrap();
    let weak = cases.iter().find(|c| c.kappa2 == 1.0).unwrap();

    let initial = &strong.snapshots[0];
    assert_eq!(initial.time, 0.0);
    assert_eq!(initial.counts, vec![32, 32, 16]);
    let params = PlasmaParams::default();
    let mut initial_err = 0.0f64;
    let mut x = [0.0; 3];
    for (j, v) in initial.values.iter().enumerate() {
        let (i0, rest) = (j / (32 * 16), j % (32 * 16));
        x[0] = initial.coordinate(0, i0);
        x[1] = initial.coordinate(1, rest / 16);
        x[2] = initial.coordinate(2, rest % 16);
        initial_err = initial_err.max((v - presets::plasma_initial(&params, &x)).abs());
    }
    let ok_initial = initial_err <= 1e-14;
    say(&format!("  t = 0 snapshot vs Gaussian: max diff {initial_err:.2e}"));

    let t_end = strong.peaks.last().unwrap()[0];
    let peak = |c: &PlasmaCase| {
        c.peaks
            .iter()
            .find(|p| p[0] == t_end && p[1] == 0.1)
            .map(|p| p[2])
            .unwrap()
    };
    let (p20, p1) = (peak(strong), peak(weak));
    let ok_peak = p1 < p20;
    say(&format!("  peak on r = 0.1 at t = {t_end}: kappa2 = 20 -> {p20:.6e}, kappa2 = 1 -> {p1:.6e}"));

    let sym_started = Instant::now();
    let (sym, _) = plasma_runs("plasma_symmetric.toml");
    let sym_elapsed = sym_started.elapsed().as_secs_f64();
    let tol = load("plasma_symmetric.toml").solver.newton_tol.unwrap_or(1e-12);
    let mut ok_sym = true;
    for t in [1.0, 4.0] {
        let snap = sym[0].snapshots.iter().find(|s| s.time == t).unwrap();
        let a = exchange_asymmetry(snap);
        ok_sym &= a <= tol;
        say(&format!("  kappa1 = kappa2, psi = 0: phi <-> theta asymmetry at t = {t}: {a:.2e} (tol {tol:.0e})"));
    }
    let ok_time = elapsed <= 600.0;
    let ok = ok_initial && ok_peak && ok_sym && ok_time;
    verdict(
        "6",
        ok,
        &format!(
            "torus 32x32x16, dt = 1/16: initial {}, symmetry {}, peak reduction {}, {elapsed:.0} s <= 600 s (symmetric run {sym_elapsed:.0} s)",
            ok_initial, ok_sym, ok_peak
        ),
    );
    assert!(ok_initial, "initial snapshot off by {initial_err}");
    assert!(ok_sym, "exchange symmetry broken");
    assert!(ok_peak, "peaks {p20} (kappa2 = 20) vs {p1} (kappa2 = 1)");
    assert!(ok_time, "{elapsed} s");
}
