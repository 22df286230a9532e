//! Problem definition for time-dependent semilinear nonlocal diffusion with a
//! volume constraint:
//!
//! ```text
//! ∂u/∂t − L[u] = f(t, x, u)          in (0, T] × D
//! u(0, x)      = φ₀(x)               in D ∪ D_v
//! u(t, x)      = φ_v(t, x)           in (0, T] × D_v
//!
//! L[u] = Σᵢ ∂ᵢ(Bᵢ u) + Σᵢⱼ ∂ᵢ∂ⱼ(Kᵢⱼ u) + ∫_E [u(x + c(t, x, q)) − u(x)] γ(q) dq,   K = ½σσᵀ
//! ```
//!
//! The probabilistic scheme needs the operator in non-divergence form; see
//! [`ProblemSpec::to_nondivergence`].

pub mod presets;
mod validate;

pub use validate::{sample_lattice, validate, ValidationReport, Violation};

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::grid::BoxDomain;
use crate::quadrature::JumpKernel;

/// `(t, x) → R`.
pub type ScalarField = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
/// `(t, x) → R^k`, written into the output slice.
pub type VectorField = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// `(t, x, q) → R^d`, written into the output slice.
pub type JumpAmplitude = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `(t, x, u) → R`.
pub type Forcing = Arc<dyn Fn(f64, &[f64], f64) -> f64 + Send + Sync>;
/// `x → R`.
pub type InitialDatum = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("missing derivative: {0} (supply it analytically or enable the finite-difference fallback)")]
    MissingDerivative(&'static str),
    #[error("horizon must be positive and finite, got {0}")]
    InvalidHorizon(f64),
    #[error("jump amplitude dimension: kernel has {kernel} jump variables but the domain has {domain} dimensions")]
    JumpDimension { kernel: usize, domain: usize },
    #[error("invalid problem: {0}")]
    Invalid(String),
}

/// How the first-order part of the operator is given.
#[derive(Clone)]
pub enum Drift {
    /// Divergence form `Σᵢ ∂ᵢ(Bᵢ u)` with optional analytic `Σᵢ ∂ᵢBᵢ`.
    Divergence {
        field: VectorField,
        divergence: Option<ScalarField>,
    },
    /// The whole local operator is already in non-divergence form
    /// `b·∇u + K:∇²u`; no reaction terms are generated.
    NonDivergence(VectorField),
}

/// Analytic derivatives of the diffusion matrix `K = ½σσᵀ`.
#[derive(Clone)]
pub struct DiffusionDerivatives {
    /// `(Σⱼ ∂Kᵢⱼ/∂xⱼ)ᵢ`
    pub first: VectorField,
    /// `Σᵢⱼ ∂²Kᵢⱼ/∂xᵢ∂xⱼ`
    pub second: ScalarField,
}

impl DiffusionDerivatives {
    pub fn zero() -> Self {
        Self {
            first: Arc::new(|_, _, out: &mut [f64]| out.fill(0.0)),
            second: Arc::new(|_, _| 0.0),
        }
    }
}

/// Central finite differences used when analytic derivatives are absent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiniteDifference {
    pub enabled: bool,
    /// Step as a fraction of each axis extent.
    pub relative_step: f64,
}

impl Default for FiniteDifference {
    fn default() -> Self {
        Self {
            enabled: false,
            relative_step: 1e-5,
        }
    }
}

/// Full definition of a problem instance. Immutable once built; all closures
/// must be pure so node updates can run in any order.
#[derive(Clone)]
pub struct ProblemSpec {
    name: String,
    domain: BoxDomain,
    horizon: f64,
    drift: Drift,
    sigma: VectorField,
    diffusion_derivatives: Option<DiffusionDerivatives>,
    jump: JumpAmplitude,
    kernel: Option<JumpKernel>,
    forcing: Forcing,
    forcing_du: Option<Forcing>,
    initial: InitialDatum,
    volume: ScalarField,
    exact: Option<ScalarField>,
    finite_difference: FiniteDifference,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("domain", &self.domain)
            .field("horizon", &self.horizon)
            .field("kernel", &self.kernel)
            .field("has_exact", &self.exact.is_some())
            .field("finite_difference", &self.finite_difference)
            .finish_non_exhaustive()
    }
}

impl ProblemSpec {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn kernel(&self) -> Option<&JumpKernel> {
        self.kernel.as_ref()
    }

    pub fn drift(&self) -> &Drift {
        &self.drift
    }

    pub fn finite_difference(&self) -> FiniteDifference {
        self.finite_difference
    }

    pub fn sigma(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.sigma)(t, x, out)
    }

    pub fn jump_amplitude(&self, t: f64, x: &[f64], q: &[f64], out: &mut [f64]) {
        (self.jump)(t, x, q, out)
    }

    pub fn forcing(&self, t: f64, x: &[f64], u: f64) -> f64 {
        (self.forcing)(t, x, u)
    }

    pub fn initial(&self, x: &[f64]) -> f64 {
        (self.initial)(x)
    }

    pub fn volume(&self, t: f64, x: &[f64]) -> f64 {
        (self.volume)(t, x)
    }

    pub fn volume_fn(&self) -> &ScalarField {
        &self.volume
    }

    pub fn exact(&self) -> Option<&ScalarField> {
        self.exact.as_ref()
    }

    pub fn diffusion_derivatives(&self) -> Option<&DiffusionDerivatives> {
        self.diffusion_derivatives.as_ref()
    }

    /// Copy of this problem with a different horizon.
    pub fn with_horizon(&self, horizon: f64) -> Result<Self, ProblemError> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(ProblemError::InvalidHorizon(horizon));
        }
        let mut spec = self.clone();
        spec.horizon = horizon;
        Ok(spec)
    }

    /// Copy of this problem with the finite-difference fallback reconfigured.
    pub fn with_finite_difference(&self, fd: FiniteDifference) -> Self {
        let mut spec = self.clone();
        spec.finite_difference = fd;
        spec
    }

    /// `K = ½σσᵀ` at `(t, x)`, row-major.
    pub fn diffusion_matrix(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let mut sigma = vec![0.0; d * d];
        self.sigma(t, x, &mut sigma);
        half_outer(&sigma, d, out);
    }

    /// Rewrite the operator in non-divergence form:
    /// `bᵢ = Bᵢ + 2 Σⱼ ∂ⱼKᵢⱼ` and `g(t, x, u) = f + (Σᵢ ∂ᵢBᵢ + Σᵢⱼ ∂ᵢ∂ⱼKᵢⱼ) u`.
    pub fn to_nondivergence(&self) -> Result<EffectiveCoefficients, ProblemError> {
        let d = self.dim();
        let fd = self.finite_difference;
        let steps: Vec<f64> = (0..d).map(|a| fd.relative_step * self.domain.extent(a)).collect();
        let mut fd_terms = Vec::new();

        let (drift, reaction): (VectorField, Option<ScalarField>) = match &self.drift {
            Drift::NonDivergence(b) => (b.clone(), None),
            Drift::Divergence { field, divergence } => {
                let div_b: ScalarField = match divergence {
                    Some(div) => div.clone(),
                    None if fd.enabled => {
                        fd_terms.push("divergence of B");
                        fd_divergence(field.clone(), d, steps.clone())
                    }
                    None => return Err(ProblemError::MissingDerivative("divergence of B")),
                };
                let derivs = match &self.diffusion_derivatives {
                    Some(derivs) => derivs.clone(),
                    None if fd.enabled => {
                        fd_terms.push("derivatives of K");
                        fd_diffusion_derivatives(self.sigma.clone(), d, steps.clone())
                    }
                    None => return Err(ProblemError::MissingDerivative("derivatives of K")),
                };
                let b_field = field.clone();
                let first = derivs.first.clone();
                let drift: VectorField = Arc::new(move |t, x, out: &mut [f64]| {
                    b_field(t, x, out);
                    let mut k1 = [0.0; crate::grid::MAX_DIM];
                    first(t, x, &mut k1[..out.len()]);
                    for (o, k) in out.iter_mut().zip(&k1) {
                        *o += 2.0 * k;
                    }
                });
                let second = derivs.second.clone();
                let reaction: ScalarField = Arc::new(move |t, x| div_b(t, x) + second(t, x));
                (drift, Some(reaction))
            }
        };

        Ok(EffectiveCoefficients {
            dim: d,
            drift,
            sigma: self.sigma.clone(),
            reaction,
            forcing: self.forcing.clone(),
            forcing_du: self.forcing_du.clone(),
            finite_difference_terms: fd_terms,
        })
    }
}

/// `out = ½ σ σᵀ` for row-major `d × d` matrices.
pub(crate) fn half_outer(sigma: &[f64], d: usize, out: &mut [f64]) {
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += sigma[i * d + k] * sigma[j * d + k];
            }
            out[i * d + j] = 0.5 * s;
        }
    }
}

fn fd_divergence(field: VectorField, d: usize, steps: Vec<f64>) -> ScalarField {
    Arc::new(move |t, x| {
        let mut y = x.to_vec();
        let mut plus = vec![0.0; d];
        let mut minus = vec![0.0; d];
        let mut div = 0.0;
        for i in 0..d {
            let h = steps[i];
            y[i] = x[i] + h;
            field(t, &y, &mut plus);
            y[i] = x[i] - h;
            field(t, &y, &mut minus);
            y[i] = x[i];
            div += (plus[i] - minus[i]) / (2.0 * h);
        }
        div
    })
}

fn fd_diffusion_derivatives(sigma: VectorField, d: usize, steps: Vec<f64>) -> DiffusionDerivatives {
    let k_at = {
        let sigma = sigma.clone();
        move |t: f64, y: &[f64], out: &mut [f64]| {
            let mut s = vec![0.0; d * d];
            sigma(t, y, &mut s);
            half_outer(&s, d, out);
        }
    };
    let k_first = k_at.clone();
    let steps1 = steps.clone();
    let first: VectorField = Arc::new(move |t, x, out: &mut [f64]| {
        let mut y = x.to_vec();
        let mut kp = vec![0.0; d * d];
        let mut km = vec![0.0; d * d];
        out.fill(0.0);
        for j in 0..d {
            let h = steps1[j];
            y[j] = x[j] + h;
            k_first(t, &y, &mut kp);
            y[j] = x[j] - h;
            k_first(t, &y, &mut km);
            y[j] = x[j];
            for i in 0..d {
                out[i] += (kp[i * d + j] - km[i * d + j]) / (2.0 * h);
            }
        }
    });
    let steps2 = steps.clone();
    let second: ScalarField = Arc::new(move |t, x| {
        let mut y = x.to_vec();
        let mut k = vec![0.0; d * d];
        let mut k0 = vec![0.0; d * d];
        k_at(t, x, &mut k0);
        let mut total = 0.0;
        for i in 0..d {
            for j in 0..d {
                let (hi, hj) = (steps2[i], steps2[j]);
                let idx = i * d + j;
                if i == j {
                    y[i] = x[i] + hi;
                    k_at(t, &y, &mut k);
                    let p = k[idx];
                    y[i] = x[i] - hi;
                    k_at(t, &y, &mut k);
                    let m = k[idx];
                    y[i] = x[i];
                    total += (p - 2.0 * k0[idx] + m) / (hi * hi);
                } else {
                    let mut acc = 0.0;
                    for (si, sj, sign) in [(1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0)] {
                        y[i] = x[i] + si * hi;
                        y[j] = x[j] + sj * hj;
                        k_at(t, &y, &mut k);
                        acc += sign * k[idx];
                    }
                    y[i] = x[i];
                    y[j] = x[j];
                    total += acc / (4.0 * hi * hj);
                }
            }
        }
        total
    });
    DiffusionDerivatives { first, second }
}

/// Coefficients of the non-divergence form consumed by the scheme.
#[derive(Clone)]
pub struct EffectiveCoefficients {
    dim: usize,
    drift: VectorField,
    sigma: VectorField,
    reaction: Option<ScalarField>,
    forcing: Forcing,
    forcing_du: Option<Forcing>,
    finite_difference_terms: Vec<&'static str>,
}

impl EffectiveCoefficients {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Effective drift `b(t, x)`.
    pub fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.drift)(t, x, out)
    }

    /// Diffusion factor `σ(t, x)`, row-major `d × d`.
    pub fn sigma(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.sigma)(t, x, out)
    }

    /// Reaction coefficient `Σᵢ ∂ᵢBᵢ + Σᵢⱼ ∂ᵢ∂ⱼKᵢⱼ` (zero in non-divergence form).
    pub fn reaction(&self, t: f64, x: &[f64]) -> f64 {
        self.reaction.as_ref().map_or(0.0, |r| r(t, x))
    }

    /// `g(t, x, u) = f(t, x, u) + reaction(t, x) · u`.
    pub fn g(&self, t: f64, x: &[f64], u: f64) -> f64 {
        (self.forcing)(t, x, u) + self.reaction(t, x) * u
    }

    /// Analytic `∂g/∂u` when the problem supplies `∂f/∂u`.
    pub fn g_du(&self, t: f64, x: &[f64], u: f64) -> Option<f64> {
        self.forcing_du.as_ref().map(|df| df(t, x, u) + self.reaction(t, x))
    }

    /// Names of derivative terms computed by finite differences.
    pub fn finite_difference_terms(&self) -> &[&'static str] {
        &self.finite_difference_terms
    }
}

/// Builder for [`ProblemSpec`]. Defaults: no drift, `σ = 0`, no jumps, `f = 0`,
/// `φ₀ = 0`, `φ_v = 0`, jump amplitude `c(t, x, q) = (q, 0, …)`.
pub struct ProblemBuilder {
    spec: ProblemSpec,
}

impl ProblemBuilder {
    pub fn new(domain: BoxDomain, horizon: f64) -> Self {
        let d = domain.dim();
        let jump: JumpAmplitude = Arc::new(move |_, _, q: &[f64], out: &mut [f64]| {
            out.fill(0.0);
            let m = q.len().min(d);
            out[..m].copy_from_slice(&q[..m]);
        });
        Self {
            spec: ProblemSpec {
                name: "custom".into(),
                domain,
                horizon,
                drift: Drift::NonDivergence(Arc::new(|_, _, out: &mut [f64]| out.fill(0.0))),
                sigma: Arc::new(|_, _, out: &mut [f64]| out.fill(0.0)),
                diffusion_derivatives: Some(DiffusionDerivatives::zero()),
                jump,
                kernel: None,
                forcing: Arc::new(|_, _, _| 0.0),
                forcing_du: None,
                initial: Arc::new(|_| 0.0),
                volume: Arc::new(|_, _| 0.0),
                exact: None,
                finite_difference: FiniteDifference::default(),
            },
        }
    }

    pub fn name(mut self, name: impl Into<String>) -> Self {
        self.spec.name = name.into();
        self
    }

    /// Divergence-form drift `B` with optional analytic divergence.
    pub fn divergence_drift(
        mut self,
        field: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
        divergence: Option<ScalarField>,
    ) -> Self {
        self.spec.drift = Drift::Divergence {
            field: Arc::new(field),
            divergence,
        };
        self
    }

    /// Non-divergence drift `b` (the local operator is `b·∇u + K:∇²u`).
    pub fn effective_drift(mut self, field: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.spec.drift = Drift::NonDivergence(Arc::new(field));
        self
    }

    /// Constant drift vector; divergence form and non-divergence form coincide.
    pub fn constant_drift(self, b: Vec<f64>) -> Self {
        self.divergence_drift(move |_, _, out| out.copy_from_slice(&b), Some(Arc::new(|_, _| 0.0)))
    }

    /// Space-time dependent `σ`; derivatives of `K` must then be supplied via
    /// [`Self::diffusion_derivatives`] or computed by finite differences.
    pub fn sigma(mut self, sigma: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.spec.sigma = Arc::new(sigma);
        self.spec.diffusion_derivatives = None;
        self
    }

    /// Constant diagonal `σ`.
    pub fn constant_sigma(mut self, diagonal: Vec<f64>) -> Self {
        let d = diagonal.len();
        self.spec.sigma = Arc::new(move |_, _, out: &mut [f64]| {
            out.fill(0.0);
            for i in 0..d {
                out[i * d + i] = diagonal[i];
            }
        });
        self.spec.diffusion_derivatives = Some(DiffusionDerivatives::zero());
        self
    }

    /// Constant full `σ` matrix, row-major.
    pub fn constant_sigma_matrix(mut self, matrix: Vec<f64>) -> Self {
        self.spec.sigma = Arc::new(move |_, _, out: &mut [f64]| out.copy_from_slice(&matrix));
        self.spec.diffusion_derivatives = Some(DiffusionDerivatives::zero());
        self
    }

    pub fn diffusion_derivatives(mut self, derivs: DiffusionDerivatives) -> Self {
        self.spec.diffusion_derivatives = Some(derivs);
        self
    }

    pub fn jump_amplitude(mut self, c: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.spec.jump = Arc::new(c);
        self
    }

    pub fn kernel(mut self, kernel: JumpKernel) -> Self {
        self.spec.kernel = Some(kernel);
        self
    }

    pub fn forcing(mut self, f: impl Fn(f64, &[f64], f64) -> f64 + Send + Sync + 'static) -> Self {
        self.spec.forcing = Arc::new(f);
        self
    }

    pub fn forcing_du(mut self, df: impl Fn(f64, &[f64], f64) -> f64 + Send + Sync + 'static) -> Self {
        self.spec.forcing_du = Some(Arc::new(df));
        self
    }

    pub fn initial(mut self, phi0: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.spec.initial = Arc::new(phi0);
        self
    }

    /// Volume constraint, evaluated on all of `R^d \ D`.
    pub fn volume(mut self, phiv: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.spec.volume = Arc::new(phiv);
        self
    }

    /// Exact solution; also used as initial datum and volume constraint.
    pub fn exact_solution(mut self, u: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        let u: ScalarField = Arc::new(u);
        let u0 = u.clone();
        self.spec.initial = Arc::new(move |x| u0(0.0, x));
        let uv = u.clone();
        self.spec.volume = Arc::new(move |t, x| uv(t, x));
        self.spec.exact = Some(u);
        self
    }

    pub fn finite_difference(mut self, fd: FiniteDifference) -> Self {
        self.spec.finite_difference = fd;
        self
    }

    pub fn build(self) -> Result<ProblemSpec, ProblemError> {
        let spec = self.spec;
        if !(spec.horizon > 0.0 && spec.horizon.is_finite()) {
            return Err(ProblemError::InvalidHorizon(spec.horizon));
        }
        if let Some(kernel) = &spec.kernel {
            if kernel.dim() > spec.dim() {
                return Err(ProblemError::JumpDimension {
                    kernel: kernel.dim(),
                    domain: spec.dim(),
                });
            }
        }
        Ok(spec)
    }
}
