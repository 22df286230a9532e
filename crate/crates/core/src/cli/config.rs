//! Run configuration files.
//!
//! A run is described by a TOML document with a mandatory `[problem]` table
//! and optional `[solver]`, `[output]`, `[sweep]`, `[plasma]` and `[mc]`
//! tables. Unknown keys anywhere are rejected.
//!
//! ```toml
//! [problem]
//! preset = "example1"
//! horizon = 0.5
//!
//! [solver]
//! dt = 0.0625
//! dx = 0.25
//! M = 2
//! h = 0.25
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::grid::{snap_intervals, BoxDomain};
use crate::problem::presets::{self, Heat1dParams, Jump1dParams, PlasmaParams};
use crate::problem::ProblemSpec;
use crate::stepper::SolverConfig;

/// Configuration problem, with the source line when it can be located.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub message: String,
    pub line: Option<usize>,
}

impl ConfigError {
    pub fn new(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            line: None,
        }
    }

    fn at(mut self, line: Option<usize>) -> Self {
        if self.line.is_none() {
            self.line = line;
        }
        self
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemBlock,
    #[serde(default)]
    pub solver: SolverBlock,
    #[serde(default)]
    pub output: OutputBlock,
    pub sweep: Option<SweepBlock>,
    pub plasma: Option<PlasmaBlock>,
    pub mc: Option<McBlock>,
}

/// A preset name plus optional overrides of its parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemBlock {
    pub preset: String,
    /// Final time `T`.
    pub horizon: Option<f64>,
    pub delta: Option<f64>,
    pub sigma: Option<f64>,
    pub lambda: Option<f64>,
    pub kappa1: Option<f64>,
    pub kappa2: Option<f64>,
    pub psi_degrees: Option<f64>,
    pub phi0: Option<f64>,
    pub theta0: Option<f64>,
    pub r0: Option<f64>,
    pub kernel_resolution: Option<usize>,
    pub half_width: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverBlock {
    pub dt: Option<f64>,
    /// Subintervals per axis; one entry is broadcast to every axis.
    pub intervals: Option<Vec<usize>>,
    /// Target spacing per axis, snapped to the nearest dividing value.
    pub dx: Option<Vec<f64>>,
    #[serde(rename = "M")]
    pub gh_points: Option<usize>,
    /// Jump-rule mesh size.
    pub h: Option<f64>,
    pub newton_tol: Option<f64>,
    pub newton_max_iter: Option<usize>,
    pub renormalize_events: Option<bool>,
    pub renormalize_jump_rule: Option<bool>,
    pub jump_prune: Option<f64>,
    pub jump_cut_cells: Option<usize>,
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnapshotFormat {
    Binary,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    pub dir: Option<PathBuf>,
    /// Snapshot times; empty means the final time only.
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
    #[serde(default = "default_formats")]
    pub formats: Vec<SnapshotFormat>,
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self {
            dir: None,
            snapshot_times: Vec::new(),
            formats: default_formats(),
        }
    }
}

fn default_formats() -> Vec<SnapshotFormat> {
    vec![SnapshotFormat::Binary]
}

/// `dx = c_x · dt^α`, `h = c_h · dt^β` for every listed `dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    pub dt: Vec<f64>,
    #[serde(default = "half")]
    pub alpha: f64,
    #[serde(default = "half")]
    pub beta: f64,
    #[serde(default = "one")]
    pub c_x: f64,
    #[serde(default = "one")]
    pub c_h: f64,
    /// Report errors relative to the RMS of the exact solution.
    #[serde(default)]
    pub relative: bool,
    /// Run rows concurrently instead of one after another.
    #[serde(default)]
    pub parallel_rows: bool,
}

fn half() -> f64 {
    0.5
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlasmaBlock {
    /// One run per value.
    #[serde(default = "default_kappa2")]
    pub kappa2: Vec<f64>,
    /// Minor radii of the `(φ, θ)` planes that are written and tracked.
    #[serde(default = "default_planes")]
    pub r_planes: Vec<f64>,
    /// `(φ, θ)` of the radial profile.
    #[serde(default)]
    pub profile_point: [f64; 2],
}

impl Default for PlasmaBlock {
    fn default() -> Self {
        Self {
            kappa2: default_kappa2(),
            r_planes: default_planes(),
            profile_point: [0.0, 0.0],
        }
    }
}

fn default_kappa2() -> Vec<f64> {
    vec![20.0, 1.0]
}

fn default_planes() -> Vec<f64> {
    vec![0.1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McBlock {
    pub probes: Vec<Vec<f64>>,
    pub n_paths: usize,
    /// Defaults to `dt / 8` of the scheme.
    pub euler_dt: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub antithetic: bool,
}

fn yes() -> bool {
    true
}

/// Problem after applying defaults, with every numeric parameter listed.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedProblem {
    pub preset: String,
    pub parameters: BTreeMap<String, f64>,
    #[serde(skip)]
    pub spec: ProblemSpec,
}

/// Line of the first `key = …` assignment in `text` (1-based).
pub fn line_of(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| {
        let l = l.trim_start();
        l.strip_prefix(key)
            .map_or(false, |rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

fn line_at(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl RunConfig {
    /// Parse and validate. Errors carry the offending line where possible.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_at(text, s.start));
            ConfigError {
                message: e.message().trim().to_string(),
                line,
            }
        })?;
        config.check().map_err(|e| {
            let line = e.key.and_then(|k| line_of(text, k));
            e.error.at(line)
        })?;
        Ok(config)
    }

    fn check(&self) -> Result<(), Keyed> {
        let positive = |key: &'static str, v: Option<f64>| match v {
            Some(v) if !(v > 0.0 && v.is_finite()) => Err(Keyed::new(key, format!("{key} must be positive, got {v}"))),
            _ => Ok(()),
        };
        let p = &self.problem;
        if !presets::PRESET_NAMES.contains(&p.preset.as_str()) {
            return Err(Keyed::new(
                "preset",
                format!("unknown preset `{}` (known: {})", p.preset, presets::PRESET_NAMES.join(", ")),
            ));
        }
        positive("horizon", p.horizon)?;
        positive("delta", p.delta)?;
        positive("lambda", p.lambda)?;
        positive("half_width", p.half_width)?;
        if let Some(s) = p.sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Keyed::new("sigma", format!("sigma must be non-negative, got {s}")));
            }
        }
        let s = &self.solver;
        positive("dt", s.dt)?;
        positive("h", s.h)?;
        positive("newton_tol", s.newton_tol)?;
        if s.gh_points == Some(0) {
            return Err(Keyed::new("M", "M must be at least 1".into()));
        }
        if s.threads == Some(0) {
            return Err(Keyed::new("threads", "threads must be at least 1".into()));
        }
        if let Some(dx) = &s.dx {
            if dx.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Keyed::new("dx", format!("dx entries must be positive, got {dx:?}")));
            }
        }
        if let Some(n) = &s.intervals {
            if n.is_empty() || n.contains(&0) {
                return Err(Keyed::new("intervals", format!("intervals must be positive, got {n:?}")));
            }
        }
        if self.output.snapshot_times.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
            return Err(Keyed::new("snapshot_times", "snapshot times must be non-negative".into()));
        }
        if let Some(sweep) = &self.sweep {
            if sweep.dt.is_empty() || sweep.dt.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Keyed::new("dt", "sweep dt values must be positive and non-empty".into()));
            }
            positive("c_x", Some(sweep.c_x))?;
            positive("c_h", Some(sweep.c_h))?;
        }
        if let Some(mc) = &self.mc {
            if mc.n_paths == 0 {
                return Err(Keyed::new("n_paths", "n_paths must be at least 1".into()));
            }
            positive("euler_dt", mc.euler_dt)?;
            if mc.probes.is_empty() {
                return Err(Keyed::new("probes", "at least one probe point is required".into()));
            }
        }
        Ok(())
    }

    /// Build the problem from its preset and overrides.
    pub fn resolve_problem(&self) -> Result<ResolvedProblem, ConfigError> {
        resolve_problem(&self.problem, None)
    }
}

struct Keyed {
    key: Option<&'static str>,
    error: ConfigError,
}

impl Keyed {
    fn new(key: &'static str, message: String) -> Self {
        Self {
            key: Some(key),
            error: ConfigError::new(message),
        }
    }
}

/// Resolve a problem block; `kappa2` overrides the block's value (plasma sweeps).
pub fn resolve_problem(block: &ProblemBlock, kappa2: Option<f64>) -> Result<ResolvedProblem, ConfigError> {
    let mut used: Vec<&str> = vec!["horizon"];
    let mut parameters = BTreeMap::new();
    let spec = match block.preset.as_str() {
        "example1" | "example1-printed" => {
            used.push("delta");
            let delta = block.delta.unwrap_or(presets::EXAMPLE1_DELTA);
            let horizon = block.horizon.unwrap_or(presets::EXAMPLE1_HORIZON);
            parameters.insert("delta".into(), delta);
            parameters.insert("horizon".into(), horizon);
            let spec = if block.preset == "example1" {
                presets::example1(delta)
            } else {
                presets::example1_printed(delta)
            };
            with_horizon(spec, horizon)?
        }
        "plasma-torus" => {
            used.extend(["sigma", "kappa1", "kappa2", "psi_degrees", "phi0", "theta0", "r0", "kernel_resolution"]);
            let d = PlasmaParams::default();
            let p = PlasmaParams {
                sigma: block.sigma.unwrap_or(d.sigma),
                kappa1: block.kappa1.unwrap_or(d.kappa1),
                kappa2: kappa2.or(block.kappa2).unwrap_or(d.kappa2),
                psi: block.psi_degrees.map_or(d.psi, f64::to_radians),
                phi0: block.phi0.unwrap_or(d.phi0),
                theta0: block.theta0.unwrap_or(d.theta0),
                r0: block.r0.unwrap_or(d.r0),
                horizon: block.horizon.unwrap_or(d.horizon),
                kernel_resolution: block.kernel_resolution.unwrap_or(d.kernel_resolution),
            };
            for (k, v) in [
                ("sigma", p.sigma),
                ("kappa1", p.kappa1),
                ("kappa2", p.kappa2),
                ("psi_degrees", p.psi.to_degrees()),
                ("phi0", p.phi0),
                ("theta0", p.theta0),
                ("r0", p.r0),
                ("horizon", p.horizon),
                ("kernel_resolution", p.kernel_resolution as f64),
            ] {
                parameters.insert(k.into(), v);
            }
            if !(p.kappa1 >= 0.0 && p.kappa2 >= 0.0) {
                return Err(ConfigError::new("kappa1 and kappa2 must be non-negative"));
            }
            if p.kernel_resolution < 2 {
                return Err(ConfigError::new("kernel_resolution must be at least 2"));
            }
            presets::plasma_torus(&p)
        }
        "jump-1d" => {
            used.extend(["sigma", "lambda", "delta"]);
            let d = Jump1dParams::default();
            let p = Jump1dParams {
                sigma: block.sigma.unwrap_or(d.sigma),
                lambda: block.lambda.unwrap_or(d.lambda),
                delta: block.delta.unwrap_or(d.delta),
                horizon: block.horizon.unwrap_or(d.horizon),
            };
            for (k, v) in [("sigma", p.sigma), ("lambda", p.lambda), ("delta", p.delta), ("horizon", p.horizon)] {
                parameters.insert(k.into(), v);
            }
            presets::jump_1d(&p)
        }
        "heat-1d" => {
            used.extend(["sigma", "half_width"]);
            let d = Heat1dParams::default();
            let p = Heat1dParams {
                sigma: block.sigma.unwrap_or(d.sigma),
                half_width: block.half_width.unwrap_or(d.half_width),
                horizon: block.horizon.unwrap_or(d.horizon),
            };
            for (k, v) in [("sigma", p.sigma), ("half_width", p.half_width), ("horizon", p.horizon)] {
                parameters.insert(k.into(), v);
            }
            presets::heat_1d(&p)
        }
        other => return Err(ConfigError::new(format!("unknown preset `{other}`"))),
    };
    let given = [
        ("horizon", block.horizon.is_some()),
        ("delta", block.delta.is_some()),
        ("sigma", block.sigma.is_some()),
        ("lambda", block.lambda.is_some()),
        ("kappa1", block.kappa1.is_some()),
        ("kappa2", block.kappa2.is_some()),
        ("psi_degrees", block.psi_degrees.is_some()),
        ("phi0", block.phi0.is_some()),
        ("theta0", block.theta0.is_some()),
        ("r0", block.r0.is_some()),
        ("kernel_resolution", block.kernel_resolution.is_some()),
        ("half_width", block.half_width.is_some()),
    ];
    if let Some((key, _)) = given.iter().find(|(k, set)| *set && !used.contains(k)) {
        return Err(ConfigError::new(format!(
            "`{key}` does not apply to preset `{}`",
            block.preset
        )));
    }
    Ok(ResolvedProblem {
        preset: block.preset.clone(),
        parameters,
        spec,
    })
}

fn with_horizon(spec: ProblemSpec, horizon: f64) -> Result<ProblemSpec, ConfigError> {
    spec.with_horizon(horizon).map_err(|e| ConfigError::new(e.to_string()))
}

/// Per-axis subinterval counts from explicit counts or target spacings.
pub fn resolve_intervals(domain: &BoxDomain, intervals: Option<&[usize]>, dx: Option<&[f64]>) -> Result<Vec<usize>, ConfigError> {
    let d = domain.dim();
    let broadcast = |len: usize, what: &str| -> Result<(), ConfigError> {
        if len == 1 || len == d {
            Ok(())
        } else {
            Err(ConfigError::new(format!("{what} needs 1 or {d} entries, got {len}")))
        }
    };
    match (intervals, dx) {
        (Some(_), Some(_)) => Err(ConfigError::new("give either `intervals` or `dx`, not both")),
        (Some(n), None) => {
            broadcast(n.len(), "intervals")?;
            Ok((0..d).map(|a| n[a.min(n.len() - 1)]).collect())
        }
        (None, Some(dx)) => {
            broadcast(dx.len(), "dx")?;
            Ok((0..d)
                .map(|a| {
                    let periodic = domain.modes()[a].is_periodic();
                    snap_intervals(domain.extent(a), dx[a.min(dx.len() - 1)], periodic)
                })
                .collect())
        }
        (None, None) => Err(ConfigError::new("solver needs `intervals` or `dx`")),
    }
}

impl SolverBlock {
    /// Solver settings for `spec`. `dt`, `intervals` and `h` given here take
    /// precedence over the block (sweeps derive them per row).
    pub fn resolve(
        &self,
        spec: &ProblemSpec,
        dt: Option<f64>,
        intervals: Option<Vec<usize>>,
        h: Option<f64>,
    ) -> Result<SolverConfig, ConfigError> {
        let dt = dt.or(self.dt).ok_or_else(|| ConfigError::new("solver needs `dt`"))?;
        let intervals = match intervals {
            Some(n) => n,
            None => resolve_intervals(spec.domain(), self.intervals.as_deref(), self.dx.as_deref())?,
        };
        let h = match (h.or(self.h), spec.kernel()) {
            (Some(h), _) => h,
            (None, None) => 1.0,
            (None, Some(_)) => return Err(ConfigError::new("problem has a jump kernel; solver needs `h`")),
        };
        let mut config = SolverConfig::new(dt, intervals, self.gh_points.unwrap_or(2), h);
        if let Some(v) = self.newton_tol {
            config.newton_tol = v;
        }
        if let Some(v) = self.newton_max_iter {
            config.newton_max_iter = v;
        }
        if let Some(v) = self.renormalize_events {
            config.renormalize_events = v;
        }
        if let Some(v) = self.renormalize_jump_rule {
            config.renormalize_jump_rule = v;
        }
        if let Some(v) = self.jump_prune {
            config.jump_prune = v;
        }
        if let Some(v) = self.jump_cut_cells {
            config.jump_cut_cells = v;
        }
        config.threads = self.threads;
        config
            .step_count(spec.horizon())
            .map_err(|e| ConfigError::new(e.to_string()))?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"
[problem]
preset = "example1"

[solver]
dt = 0.0625
dx = [0.25]
M = 2
h = 0.25
"#;

    #[test]
    fn parses_and_resolves() {
        let cfg = RunConfig::from_toml(BASIC).unwrap();
        let problem = cfg.resolve_problem().unwrap();
        assert_eq!(problem.parameters["horizon"], 0.5);
        let solver = cfg.solver.resolve(&problem.spec, None, None, None).unwrap();
        assert_eq!(solver.intervals, vec![4, 4, 4]);
        assert_eq!(solver.gh_points, 2);
        assert_eq!(cfg.output.formats, vec![SnapshotFormat::Binary]);
    }

    #[test]
    fn unknown_key_reports_line() {
        let text = BASIC.replace("M = 2", "M = 2\nbogus = 1");
        let err = RunConfig::from_toml(&text).unwrap_err();
        assert_eq!(err.line, Some(9), "{err}");
        assert!(err.message.contains("bogus"), "{err}");
    }

    #[test]
    fn zero_horizon_is_rejected_with_line() {
        let text = BASIC.replace("preset = \"example1\"", "preset = \"example1\"\nhorizon = 0.0");
        let err = RunConfig::from_toml(&text).unwrap_err();
        assert_eq!(err.line, Some(4));
        assert!(err.message.contains("horizon"));
    }

    #[test]
    fn zero_paths_is_rejected() {
        let text = format!("{BASIC}\n[mc]\nprobes = [[0.5, 0.5, 0.5]]\nn_paths = 0\n");
        let err = RunConfig::from_toml(&text).unwrap_err();
        assert!(err.message.contains("n_paths"));
        assert_eq!(err.line, line_of(&text, "n_paths"));
    }

    #[test]
    fn foreign_parameter_is_rejected() {
        let text = BASIC.replace("preset = \"example1\"", "preset = \"example1\"\nkappa1 = 3.0");
        let cfg = RunConfig::from_toml(&text).unwrap();
        assert!(cfg.resolve_problem().unwrap_err().message.contains("kappa1"));
    }

    #[test]
    fn dt_must_divide_horizon() {
        let cfg = RunConfig::from_toml(&BASIC.replace("0.0625", "0.3")).unwrap();
        let problem = cfg.resolve_problem().unwrap();
        assert!(cfg.solver.resolve(&problem.spec, None, None, None).is_err());
    }

    #[test]
    fn intervals_broadcast_and_conflict() {
        let domain = BoxDomain::volume_box(vec![0.0; 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(resolve_intervals(&domain, Some(&[5]), None).unwrap(), vec![5, 5]);
        assert_eq!(resolve_intervals(&domain, None, Some(&[0.25])).unwrap(), vec![4, 8]);
        assert!(resolve_intervals(&domain, Some(&[5]), Some(&[0.1])).is_err());
        assert!(resolve_intervals(&domain, Some(&[1, 2, 3]), None).is_err());
    }

    #[test]
    fn plasma_parameters_are_listed() {
        let text = "[problem]\npreset = \"plasma-torus\"\nkappa2 = 5.0\n";
        let cfg = RunConfig::from_toml(text).unwrap();
        let p = cfg.resolve_problem().unwrap();
        assert_eq!(p.parameters["kappa2"], 5.0);
        assert!((p.parameters["psi_degrees"] - 30.0).abs() < 1e-12);
        let p = resolve_problem(&cfg.problem, Some(1.0)).unwrap();
        assert_eq!(p.parameters["kappa2"], 1.0);
    }
}
