//! The probabilistic time stepper.
//!
//! For each solved node `x_j` and step `t_n → t_{n+1}`:
//!
//! 1. `Ê = Σ_m w_m u(t_n, x_j + b Δt + σ √(2Δt) e_m)` with `b`, `σ` frozen at `(t_{n+1}, x_j)`;
//! 2. `Ẽ = Σ_l v_l u(t_n, x_j + c(t_{n+1}, x_j, a_l))`;
//! 3. `A = p₀ Ê + p₁ Ẽ` with Poisson event weights for one window of length `Δt`;
//! 4. solve `u = A + Δt g(t_{n+1}, x_j, u)`.
//!
//! Field values outside `D̄` come from the volume constraint.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::grid::{brownian_abscissa, classify_nodes, eval_field_tracked, GridError, Interpolant, NodeClass, Snapshot, TensorGrid, MAX_DIM};
use crate::problem::{EffectiveCoefficients, ProblemError, ProblemSpec, ScalarField};
use crate::quadrature::{
    gauss_hermite, jump_rule_cut_cells, jump_rule_with, poisson_weights, EventWeights, NormalizedKernel, QuadratureError, QuadratureRule,
    Renormalize,
};

/// Lattice resolution for kernels without a recorded mass.
const KERNEL_RESOLUTION: usize = 64;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error("pointwise solve failed at {} node(s) in step {step} (t = {time}); first: {}", failures.len(), failures[0])]
    NonConvergence {
        step: usize,
        time: f64,
        failures: Vec<NodeFailure>,
    },
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeFailure {
    pub node: usize,
    pub x: Vec<f64>,
    pub residual: f64,
}

impl std::fmt::Display for NodeFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "node {} at {:?}, residual {:e}", self.node, self.x, self.residual)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SolverConfig {
    pub dt: f64,
    /// Grid subintervals per axis.
    pub intervals: Vec<usize>,
    /// Gauss-Hermite points per axis.
    pub gh_points: usize,
    /// Jump-rule mesh size.
    pub jump_h: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Rescale the event weights so that `p₀ + p₁ = 1`.
    pub renormalize_events: bool,
    /// Rescale jump-rule weights to sum to one.
    pub renormalize_jump_rule: bool,
    /// Drop jump-rule nodes whose weight is below this fraction of the largest.
    pub jump_prune: f64,
    /// Sub-samples per axis for cut cells of a curved kernel support; `0`
    /// keeps the plain masked lattice.
    #[serde(default)]
    pub jump_cut_cells: usize,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl SolverConfig {
    pub fn new(dt: f64, intervals: Vec<usize>, gh_points: usize, jump_h: f64) -> Self {
        Self {
            dt,
            intervals,
            gh_points,
            jump_h,
            newton_tol: 1e-12,
            newton_max_iter: 50,
            renormalize_events: true,
            renormalize_jump_rule: true,
            jump_prune: 0.0,
            jump_cut_cells: 0,
            threads: None,
        }
    }

    /// Number of steps to reach `horizon`; `dt` must divide it.
    pub fn step_count(&self, horizon: f64) -> Result<usize, SolverError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SolverError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(horizon > 0.0) {
            return Err(SolverError::Config(format!("horizon must be positive, got {horizon}")));
        }
        let ratio = horizon / self.dt;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-12 * ratio.max(1.0) {
            return Err(SolverError::Config(format!("dt = {} does not divide T = {horizon}", self.dt)));
        }
        Ok(n as usize)
    }

    fn check(&self) -> Result<(), SolverError> {
        if self.gh_points == 0 {
            return Err(SolverError::Config("M must be at least 1".into()));
        }
        if !(self.jump_h > 0.0) {
            return Err(SolverError::Config(format!("jump mesh size must be positive, got {}", self.jump_h)));
        }
        if !(self.newton_tol > 0.0) || self.newton_max_iter == 0 {
            return Err(SolverError::Config("Newton tolerance and iteration cap must be positive".into()));
        }
        if self.threads == Some(0) {
            return Err(SolverError::Config("thread count must be positive".into()));
        }
        Ok(())
    }
}

/// Counters for one step.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize)]
pub struct StepDiagnostics {
    pub newton_iterations: usize,
    pub max_newton_iterations: usize,
    pub fixed_point_fallbacks: usize,
    /// Brownian abscissae that left `D̄` and were served by the volume constraint.
    pub brownian_escapes: usize,
    /// Jump abscissae that left `D̄`.
    pub jump_escapes: usize,
}

impl StepDiagnostics {
    fn absorb(&mut self, node: &NodeUpdate) {
        self.newton_iterations += node.iterations;
        self.max_newton_iterations = self.max_newton_iterations.max(node.iterations);
        self.fixed_point_fallbacks += node.fallback as usize;
        self.brownian_escapes += node.brownian_escapes;
        self.jump_escapes += node.jump_escapes;
    }
}

#[derive(Debug, Clone)]
pub struct StepState {
    pub step: usize,
    pub time: f64,
    pub field: Interpolant,
    pub diagnostics: StepDiagnostics,
}

/// Receives the state at `t = 0` and after every step.
pub trait Observer {
    fn observe(&mut self, state: &StepState);
}

impl<F: FnMut(&StepState)> Observer for F {
    fn observe(&mut self, state: &StepState) {
        self(state)
    }
}

/// Records snapshots at the requested times (matched to the nearest step).
#[derive(Debug, Clone, Default)]
pub struct SnapshotRecorder {
    times: Vec<f64>,
    tolerance: f64,
    pub snapshots: Vec<Snapshot>,
}

impl SnapshotRecorder {
    pub fn new(times: Vec<f64>, dt: f64) -> Self {
        Self {
            times,
            tolerance: 0.5 * dt,
            snapshots: Vec::new(),
        }
    }
}

impl Observer for SnapshotRecorder {
    fn observe(&mut self, state: &StepState) {
        if self.times.iter().any(|t| (t - state.time).abs() < self.tolerance) {
            self.snapshots.push(Snapshot::from_interpolant(&state.field, state.time));
        }
    }
}

/// Result of a pointwise solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointwiseSolution {
    pub value: f64,
    pub iterations: usize,
    pub fallback: bool,
}

/// Solve `u = a + dt · g(u)` for `u`.
///
/// Newton iteration from `u = a` with `g'` from `dg` or a central difference
/// (step `1e-7 · max(1, |u|)`); on stagnation a damped fixed-point iteration.
/// Converged when `|u − a − dt g(u)| ≤ tol · max(1, |a|)`. On failure returns
/// the last residual.
pub fn pointwise_solve(
    a: f64,
    g: impl Fn(f64) -> f64,
    dg: Option<&dyn Fn(f64) -> f64>,
    dt: f64,
    tol: f64,
    max_iter: usize,
) -> Result<PointwiseSolution, f64> {
    let scale = a.abs().max(1.0);
    let residual = |u: f64| u - a - dt * g(u);
    let mut u = a;
    let mut r = residual(u);
    if r.abs() <= tol * scale {
        return Ok(PointwiseSolution {
            value: u,
            iterations: 0,
            fallback: false,
        });
    }
    for k in 1..=max_iter {
        let slope = match dg {
            Some(dg) => 1.0 - dt * dg(u),
            None => {
                let eps = 1e-7 * u.abs().max(1.0);
                1.0 - dt * (g(u + eps) - g(u - eps)) / (2.0 * eps)
            }
        };
        if !slope.is_finite() || slope.abs() < 1e-14 {
            break;
        }
        let next = u - r / slope;
        if !next.is_finite() {
            break;
        }
        u = next;
        r = residual(u);
        if r.abs() <= tol * scale {
            return Ok(PointwiseSolution {
                value: u,
                iterations: k,
                fallback: false,
            });
        }
    }

    let mut u = a;
    let mut best = f64::INFINITY;
    for k in 1..=4 * max_iter {
        let target = a + dt * g(u);
        u = 0.5 * u + 0.5 * target;
        let r = residual(u);
        best = best.min(r.abs());
        if !u.is_finite() {
            break;
        }
        if r.abs() <= tol * scale {
            return Ok(PointwiseSolution {
                value: u,
                iterations: max_iter + k,
                fallback: true,
            });
        }
    }
    Err(if best.is_finite() { best } else { r })
}

#[derive(Debug, Clone, Copy, Default)]
struct NodeUpdate {
    value: f64,
    iterations: usize,
    fallback: bool,
    brownian_escapes: usize,
    jump_escapes: usize,
}

/// A problem discretized for a given configuration.
pub struct Solver {
    spec: ProblemSpec,
    coefficients: EffectiveCoefficients,
    config: SolverConfig,
    grid: Arc<TensorGrid>,
    solved: Vec<usize>,
    gh: QuadratureRule,
    jump: Option<QuadratureRule>,
    events: EventWeights,
    lambda: f64,
    steps: usize,
    flagged: usize,
    pool: Option<rayon::ThreadPool>,
}

impl Solver {
    pub fn new(spec: &ProblemSpec, config: &SolverConfig) -> Result<Self, SolverError> {
        config.check()?;
        let steps = config.step_count(spec.horizon())?;
        let coefficients = spec.to_nondivergence()?;
        let d = spec.dim();
        if config.intervals.len() != d {
            return Err(SolverError::Config(format!(
                "grid needs {d} interval counts, got {}",
                config.intervals.len()
            )));
        }
        let mut grid = TensorGrid::with_intervals(spec.domain(), &config.intervals)?;
        let gh = gauss_hermite(config.gh_points, d)?;
        let (jump, lambda) = match spec.kernel() {
            Some(kernel) => {
                let nk = NormalizedKernel::from_kernel(kernel.clone(), KERNEL_RESOLUTION)?;
                let renorm = if config.renormalize_jump_rule {
                    Renormalize::Yes
                } else {
                    Renormalize::No
                };
                let rule = if config.jump_cut_cells > 0 {
                    jump_rule_cut_cells(&nk, config.jump_h, config.jump_cut_cells, renorm)?
                } else {
                    jump_rule_with(&nk, config.jump_h, renorm)?
                };
                let rule = rule.pruned(config.jump_prune);
                (Some(rule), nk.lambda)
            }
            None => (None, 0.0),
        };
        let mut events = poisson_weights(lambda, config.dt);
        if config.renormalize_events {
            events = events.renormalized();
        }
        let report = classify_nodes(&mut grid, &coefficients, &gh, config.dt, config.dt);
        if !report.flagged.is_empty() {
            log::warn!(
                "{} solved node(s) have Brownian abscissae outside the domain; they read the volume constraint",
                report.flagged.len()
            );
        }
        let solved: Vec<usize> = grid.solved_nodes().collect();
        let pool = match config.threads {
            Some(n) => Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| SolverError::ThreadPool(e.to_string()))?,
            ),
            None => None,
        };
        Ok(Self {
            spec: spec.clone(),
            coefficients,
            config: config.clone(),
            grid: Arc::new(grid),
            solved,
            gh,
            jump,
            events,
            lambda,
            steps,
            flagged: report.flagged.len(),
            pool,
        })
    }

    pub fn grid(&self) -> &Arc<TensorGrid> {
        &self.grid
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn event_weights(&self) -> EventWeights {
        self.events
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn gh_rule(&self) -> &QuadratureRule {
        &self.gh
    }

    pub fn jump_rule(&self) -> Option<&QuadratureRule> {
        self.jump.as_ref()
    }

    /// Solved nodes whose Brownian abscissae leave the domain.
    pub fn boundary_layer_nodes(&self) -> usize {
        self.flagged
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.config.dt
    }

    /// State at `t = 0`: `φ₀` at every node.
    pub fn initial_state(&self) -> StepState {
        let spec = &self.spec;
        StepState {
            step: 0,
            time: 0.0,
            field: Interpolant::from_fn(self.grid.clone(), |x| spec.initial(x)),
            diagnostics: StepDiagnostics::default(),
        }
    }

    /// `Σ_m w_m u(t_n, x + b Δt + σ √(2Δt) e_m)`; returns the value and the
    /// number of abscissae outside `D̄`.
    pub fn brownian_expectation(&self, field: &Interpolant, t_prev: f64, x: &[f64]) -> (f64, usize) {
        let d = x.len();
        let dt = self.config.dt;
        let t_next = t_prev + dt;
        let mut drift = [0.0; MAX_DIM];
        let mut sigma = [0.0; MAX_DIM * MAX_DIM];
        self.coefficients.drift(t_next, x, &mut drift[..d]);
        self.coefficients.sigma(t_next, x, &mut sigma[..d * d]);
        let scale = (2.0 * dt).sqrt();
        let volume = self.spec.volume_fn();
        let mut y = [0.0; MAX_DIM];
        let mut sum = 0.0;
        let mut escapes = 0;
        for (e, w) in self.gh.iter() {
            brownian_abscissa(x, &drift[..d], &sigma[..d * d], e, dt, scale, &mut y[..d]);
            let (v, out) = eval_field_tracked(field, volume.as_ref(), t_prev, &y[..d]);
            sum += w * v;
            escapes += out as usize;
        }
        (sum, escapes)
    }

    /// `Σ_l v_l u(t_n, x + c(t_{n+1}, x, a_l))`; the value and the number of
    /// abscissae outside `D̄`. Without a kernel returns the field at `x`.
    pub fn jump_expectation(&self, field: &Interpolant, t_prev: f64, x: &[f64]) -> (f64, usize) {
        let d = x.len();
        let volume = self.spec.volume_fn();
        let Some(rule) = &self.jump else {
            let (v, out) = eval_field_tracked(field, volume.as_ref(), t_prev, x);
            return (v, out as usize);
        };
        let t_next = t_prev + self.config.dt;
        let mut c = [0.0; MAX_DIM];
        let mut y = [0.0; MAX_DIM];
        let mut sum = 0.0;
        let mut escapes = 0;
        for (q, w) in rule.iter() {
            self.spec.jump_amplitude(t_next, x, q, &mut c[..d]);
            for i in 0..d {
                y[i] = x[i] + c[i];
            }
            let (v, out) = eval_field_tracked(field, volume.as_ref(), t_prev, &y[..d]);
            sum += w * v;
            escapes += out as usize;
        }
        (sum, escapes)
    }

    fn update_node(&self, field: &Interpolant, t_prev: f64, j: usize) -> Result<NodeUpdate, NodeFailure> {
        let d = self.grid.dim();
        let mut x = [0.0; MAX_DIM];
        self.grid.node_point(j, &mut x[..d]);
        let x = &x[..d];
        let (e_hat, brownian_escapes) = self.brownian_expectation(field, t_prev, x);
        let (e_tilde, jump_escapes) = if self.events.p1 > 0.0 {
            self.jump_expectation(field, t_prev, x)
        } else {
            (0.0, 0)
        };
        let a = self.events.p0 * e_hat + self.events.p1 * e_tilde;
        let t_next = t_prev + self.config.dt;
        let coeffs = &self.coefficients;
        let g = |u: f64| coeffs.g(t_next, x, u);
        let dg_fn = |u: f64| coeffs.g_du(t_next, x, u).unwrap_or(0.0);
        let has_dg = coeffs.g_du(t_next, x, a).is_some();
        let dg: Option<&dyn Fn(f64) -> f64> = if has_dg { Some(&dg_fn) } else { None };
        match pointwise_solve(a, g, dg, self.config.dt, self.config.newton_tol, self.config.newton_max_iter) {
            Ok(sol) => Ok(NodeUpdate {
                value: sol.value,
                iterations: sol.iterations,
                fallback: sol.fallback,
                brownian_escapes,
                jump_escapes,
            }),
            Err(residual) => Err(NodeFailure {
                node: j,
                x: x.to_vec(),
                residual,
            }),
        }
    }

    /// Advance one step. Constrained nodes take the volume constraint at the new time.
    pub fn step(&self, state: &StepState) -> Result<StepState, SolverError> {
        let t_prev = state.time;
        let step = state.step + 1;
        let t_next = self.time(step);
        let field = &state.field;
        let compute = || -> Vec<Result<NodeUpdate, NodeFailure>> {
            self.solved
                .par_iter()
                .map(|&j| self.update_node(field, t_prev, j))
                .collect()
        };
        let results = match &self.pool {
            Some(pool) => pool.install(compute),
            None => compute(),
        };

        let mut values = vec![0.0; self.grid.len()];
        let mut x = vec![0.0; self.grid.dim()];
        for (j, class) in self.grid.mask().iter().enumerate() {
            if *class == NodeClass::Constrained {
                self.grid.node_point(j, &mut x);
                values[j] = self.spec.volume(t_next, &x);
            }
        }
        let mut diagnostics = StepDiagnostics::default();
        let mut failures = Vec::new();
        for (&j, result) in self.solved.iter().zip(results) {
            match result {
                Ok(update) => {
                    diagnostics.absorb(&update);
                    values[j] = update.value;
                }
                Err(failure) => failures.push(failure),
            }
        }
        if !failures.is_empty() {
            return Err(SolverError::NonConvergence {
                step,
                time: t_next,
                failures,
            });
        }
        Ok(StepState {
            step,
            time: t_next,
            field: Interpolant::new(self.grid.clone(), values)?,
            diagnostics,
        })
    }

    /// Run all steps, notifying observers at `t = 0` and after each step.
    pub fn run(&self, observers: &mut [&mut dyn Observer]) -> Result<StepState, SolverError> {
        let mut state = self.initial_state();
        for obs in observers.iter_mut() {
            obs.observe(&state);
        }
        for _ in 0..self.steps {
            state = self.step(&state)?;
            for obs in observers.iter_mut() {
                obs.observe(&state);
            }
        }
        Ok(state)
    }

    /// Root-mean-square difference to `exact` over solved nodes at the state's time.
    pub fn l2_error(&self, state: &StepState, exact: &ScalarField) -> f64 {
        let mut x = vec![0.0; self.grid.dim()];
        let values = state.field.values();
        let mut sum = 0.0;
        for &j in &self.solved {
            self.grid.node_point(j, &mut x);
            let e = values[j] - exact(state.time, &x);
            sum += e * e;
        }
        (sum / self.solved.len().max(1) as f64).sqrt()
    }

    /// Root-mean-square of `exact` over solved nodes (for relative errors).
    pub fn l2_norm(&self, time: f64, exact: &ScalarField) -> f64 {
        let mut x = vec![0.0; self.grid.dim()];
        let sum: f64 = self
            .solved
            .iter()
            .map(|&j| {
                self.grid.node_point(j, &mut x);
                exact(time, &x).powi(2)
            })
            .sum();
        (sum / self.solved.len().max(1) as f64).sqrt()
    }
}

/// Final state of a run plus wall time.
#[derive(Debug, Clone)]
pub struct Solution {
    pub state: StepState,
    pub wall_time: f64,
    pub steps: usize,
}

/// Discretize `spec` with `config` and run to the horizon.
pub fn solve(spec: &ProblemSpec, config: &SolverConfig, observers: &mut [&mut dyn Observer]) -> Result<Solution, SolverError> {
    let started = Instant::now();
    let solver = Solver::new(spec, config)?;
    let state = solver.run(observers)?;
    Ok(Solution {
        state,
        wall_time: started.elapsed().as_secs_f64(),
        steps: solver.steps(),
    })
}
