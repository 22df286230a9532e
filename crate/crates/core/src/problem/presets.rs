//! Built-in problem instances.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::grid::{AxisMode, BoxDomain, Side};
use crate::quadrature::{trapezoid_integral, JumpKernel};

use super::{DiffusionDerivatives, ProblemBuilder, ProblemSpec};

/// Names accepted by [`by_name`].
pub const PRESET_NAMES: &[&str] = &["example1", "example1-printed", "plasma-torus", "jump-1d", "heat-1d"];

/// Preset with default parameters.
pub fn by_name(name: &str) -> Option<ProblemSpec> {
    match name {
        "example1" => Some(example1(EXAMPLE1_DELTA)),
        "example1-printed" => Some(example1_printed(EXAMPLE1_DELTA)),
        "plasma-torus" => Some(plasma_torus(&PlasmaParams::default())),
        "jump-1d" => Some(jump_1d(&Jump1dParams::default())),
        "heat-1d" => Some(heat_1d(&Heat1dParams::default())),
        _ => None,
    }
}

pub const EXAMPLE1_DELTA: f64 = 0.3;
pub const EXAMPLE1_HORIZON: f64 = 0.5;

fn p4(x: f64) -> f64 {
    x.powi(4) - x * x
}

fn dp4(x: f64) -> f64 {
    4.0 * x.powi(3) - 2.0 * x
}

fn d2p4(x: f64) -> f64 {
    12.0 * x * x - 2.0
}

/// `u(t, x) = sin(5t) Σᵢ (xᵢ⁴ − xᵢ²)`
pub fn example1_exact(t: f64, x: &[f64]) -> f64 {
    (5.0 * t).sin() * x.iter().map(|&v| p4(v)).sum::<f64>()
}

fn example1_drift(t: f64, x: &[f64], out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = t * (v.powi(5) - 5.0 / 3.0 * v.powi(3));
    }
}

fn example1_drift_divergence(t: f64, x: &[f64]) -> f64 {
    x.iter().map(|&v| t * (5.0 * v.powi(4) - 5.0 * v * v)).sum()
}

/// Diagonal factor `s(x) = (sin x₁, cos x₂, x₃)` with `σ = (1 − t) diag(s)`,
/// returned as `(s, s', s'')` per axis.
fn example1_sigma_profile(x: &[f64]) -> [(f64, f64, f64); 3] {
    [
        (x[0].sin(), x[0].cos(), -x[0].sin()),
        (x[1].cos(), -x[1].sin(), -x[1].cos()),
        (x[2], 1.0, 0.0),
    ]
}

/// Shifted jump target per axis: `y = x + c(t, x, 0)`.
fn example1_shift(t: f64, x: &[f64]) -> [f64; 3] {
    [x[0], x[1] + 0.5 * t, 1.25 * x[2]]
}

/// Source term `F(t, x) = ∂ₜu − L[u]` of the exact solution.
pub fn example1_source(delta: f64, t: f64, x: &[f64]) -> f64 {
    let s5 = (5.0 * t).sin();
    let ut = 5.0 * (5.0 * t).cos() * x.iter().map(|&v| p4(v)).sum::<f64>();
    let u = example1_exact(t, x);

    let mut b = [0.0; 3];
    example1_drift(t, x, &mut b);
    let mut local = example1_drift_divergence(t, x) * u;
    for i in 0..3 {
        local += b[i] * s5 * dp4(x[i]);
    }

    let damp = (1.0 - t) * (1.0 - t);
    for (i, (s, s1, s2)) in example1_sigma_profile(x).into_iter().enumerate() {
        let k = 0.5 * damp * s * s;
        let k1 = damp * s * s1;
        let k2 = damp * (s1 * s1 + s * s2);
        local += k2 * u + 2.0 * k1 * s5 * dp4(x[i]) + k * s5 * d2p4(x[i]);
    }

    // ∫ [P(y + q) − P(x)] γ dq over the ball, per axis
    let lambda = 4.0 * PI / 3.0;
    let mu2 = 4.0 * PI / 15.0 * delta * delta;
    let mu4 = 4.0 * PI / 35.0 * delta.powi(4);
    let y = example1_shift(t, x);
    let jump: f64 = (0..3)
        .map(|i| lambda * (p4(y[i]) - p4(x[i])) + mu2 * (6.0 * y[i] * y[i] - 1.0) + mu4)
        .sum();

    ut - local - s5 * jump
}

fn example1_builder(delta: f64) -> ProblemBuilder {
    let domain = BoxDomain::volume_box(vec![0.0; 3], vec![1.0; 3]).expect("unit cube");
    let kernel = JumpKernel::uniform_ball(3, delta, delta.powi(-3)).expect("ball kernel");
    ProblemBuilder::new(domain, EXAMPLE1_HORIZON)
        .divergence_drift(example1_drift, Some(Arc::new(example1_drift_divergence)))
        .sigma(|t, x, out| {
            out.fill(0.0);
            let damp = 1.0 - t;
            for (i, (s, _, _)) in example1_sigma_profile(x).into_iter().enumerate() {
                out[i * 3 + i] = damp * s;
            }
        })
        .diffusion_derivatives(DiffusionDerivatives {
            first: Arc::new(|t, x, out| {
                let damp = (1.0 - t) * (1.0 - t);
                for (i, (s, s1, _)) in example1_sigma_profile(x).into_iter().enumerate() {
                    out[i] = damp * s * s1;
                }
            }),
            second: Arc::new(|t, x| {
                let damp = (1.0 - t) * (1.0 - t);
                example1_sigma_profile(x)
                    .into_iter()
                    .map(|(s, s1, s2)| damp * (s1 * s1 + s * s2))
                    .sum()
            }),
        })
        .jump_amplitude(|t, x, q, out| {
            out[0] = q[0];
            out[1] = q[1] + 0.5 * t;
            out[2] = q[2] + 0.25 * x[2];
        })
        .kernel(kernel)
        .forcing_du(|_, _, u| -2.0 * u)
        .exact_solution(example1_exact)
}

/// Manufactured 3D problem on the unit cube with exact solution
/// [`example1_exact`] and forcing `f = F(t, x) + u_exact² − u²`.
pub fn example1(delta: f64) -> ProblemSpec {
    example1_builder(delta)
        .name("example1")
        .forcing(move |t, x, u| {
            let ue = example1_exact(t, x);
            example1_source(delta, t, x) + ue * ue - u * u
        })
        .build()
        .expect("example1 preset")
}

/// Forcing of the manufactured problem transcribed term by term from its
/// published form. It is not consistent with [`example1_exact`]; kept for
/// comparison runs.
pub fn example1_printed_forcing(delta: f64, t: f64, x: &[f64], u: f64) -> f64 {
    let s5 = (5.0 * t).sin();
    let (x1, x2, x3) = (x[0], x[1], x[2]);
    let mut b = [0.0; 3];
    example1_drift(t, x, &mut b);
    let adv: f64 = (0..3).map(|i| dp4(x[i]) * b[i]).sum();
    5.0 * (5.0 * t).cos() * x.iter().map(|&v| p4(v)).sum::<f64>()
        - u * u
        - s5 * adv
        - u * (2.0 * (2.0 * x1).cos() - 2.0 * (2.0 * x2).cos() + 2.0)
        - s5 * (2.0 * dp4(x1) * (2.0 * x1).sin() - 2.0 * dp4(x2) * (2.0 * x2).sin() + 16.0 * x3.powi(4) - 8.0 * x3 * x3)
        - s5 * (d2p4(x1) * x1.sin().powi(2) + d2p4(x2) * x1.cos().powi(2) + 12.0 * x3.powi(4) - 2.0 * x3 * x3)
        - s5 * (12.0 * PI / 35.0 * delta.powi(4)
            + 4.0 * PI / 15.0
                * delta
                * delta
                * (6.0 * x1 * x1 + 6.0 * x2 * t + 6.0 * x2 * x2 + 1.5 * t * t + 75.0 / 8.0 * x3 * x3 - 1.0)
            + 4.0 * PI / 3.0
                * (2.0 * x2.powi(3) * t
                    + 0.5 * x2 * t.powi(3)
                    + 1.5 * x2 * x2 * t * t
                    + t.powi(4) / 16.0
                    + 77.0 / 64.0 * x3.powi(4)))
}

pub fn example1_printed(delta: f64) -> ProblemSpec {
    example1_builder(delta)
        .name("example1-printed")
        .forcing(move |t, x, u| example1_printed_forcing(delta, t, x, u))
        .forcing_du(move |_, x, u| -2.0 * u - (2.0 * (2.0 * x[0]).cos() - 2.0 * (2.0 * x[1]).cos() + 2.0))
        .build()
        .expect("example1-printed preset")
}

/// Parameters of the toroidal heat-pulse problem on `(φ, θ, r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlasmaParams {
    pub sigma: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    /// Anisotropy angle in radians.
    pub psi: f64,
    pub phi0: f64,
    pub theta0: f64,
    pub r0: f64,
    pub horizon: f64,
    /// Subintervals per axis of the lattice used to normalize the kernel.
    pub kernel_resolution: usize,
}

impl Default for PlasmaParams {
    fn default() -> Self {
        Self {
            sigma: 0.01,
            kappa1: 20.0,
            kappa2: 20.0,
            psi: 30f64.to_radians(),
            phi0: PI,
            theta0: PI,
            r0: 0.25,
            horizon: 32.0,
            kernel_resolution: 256,
        }
    }
}

pub const PLASMA_RADIUS: f64 = 0.5;

pub fn plasma_domain() -> BoxDomain {
    BoxDomain::new(
        vec![0.0, 0.0, 0.0],
        vec![2.0 * PI, 2.0 * PI, PLASMA_RADIUS],
        vec![
            AxisMode::Periodic,
            AxisMode::Periodic,
            AxisMode::Bounded {
                lower: Side::Reflect,
                upper: Side::Volume,
            },
        ],
    )
    .expect("torus box")
}

/// Truncated, rotated von Mises kernel on the disk `|q| ≤ π`, normalized to
/// unit mass on a lattice of `resolution` subintervals per axis.
pub fn von_mises_kernel(kappa1: f64, kappa2: f64, psi: f64, resolution: usize) -> JumpKernel {
    let (s, c) = psi.sin_cos();
    // exp(κ (cos q − 1)) keeps the values bounded for large κ; the shift
    // cancels in the normalization.
    let raw = move |q: &[f64]| {
        let h1 = q[0] * c + q[1] * s;
        let h2 = -q[0] * s + q[1] * c;
        (kappa1 * (h1.cos() - 1.0) + kappa2 * (h2.cos() - 1.0)).exp()
    };
    let disk = |q: &[f64]| q[0] * q[0] + q[1] * q[1] <= PI * PI * (1.0 + 1e-12);
    let unnormalized = JumpKernel::new(vec![-PI; 2], vec![PI; 2], raw)
        .expect("disk box")
        .with_indicator(disk);
    let z = trapezoid_integral(&unnormalized, &[resolution, resolution]);
    JumpKernel::new(vec![-PI; 2], vec![PI; 2], move |q| raw(q) / z)
        .expect("disk box")
        .with_indicator(disk)
        .with_exact_mass(1.0)
}

pub fn plasma_initial(p: &PlasmaParams, x: &[f64]) -> f64 {
    (-(x[0] - p.phi0).powi(2) / 0.5 - (x[1] - p.theta0).powi(2) / 0.5 - (x[2] - p.r0).powi(2) / 0.005).exp()
}

/// Nonlocal transport in the angles, local diffusion in `r`, no forcing.
pub fn plasma_torus(p: &PlasmaParams) -> ProblemSpec {
    let params = p.clone();
    ProblemBuilder::new(plasma_domain(), p.horizon)
        .name("plasma-torus")
        .constant_sigma(vec![0.0, 0.0, p.sigma])
        .constant_drift(vec![0.0; 3])
        .jump_amplitude(|_, _, q, out| {
            out[0] = q[0];
            out[1] = q[1];
            out[2] = 0.0;
        })
        .kernel(von_mises_kernel(p.kappa1, p.kappa2, p.psi, p.kernel_resolution))
        .initial(move |x| plasma_initial(&params, x))
        .volume(|_, _| 0.0)
        .build()
        .expect("plasma preset")
}

/// One-dimensional jump-diffusion with a uniform kernel and a known solution.
#[derive(Debug, Clone, PartialEq)]
pub struct Jump1dParams {
    pub sigma: f64,
    /// Kernel mass `λ`; `γ = λ / (2δ)` on `[−δ, δ]`.
    pub lambda: f64,
    pub delta: f64,
    pub horizon: f64,
}

impl Default for Jump1dParams {
    fn default() -> Self {
        Self {
            sigma: 0.3,
            lambda: 2.0,
            delta: 0.3,
            horizon: 0.5,
        }
    }
}

/// `u(t, x) = e^{−t/2} cos(πx) + x/2` on `D = (0, 1)`, forcing independent of `u`.
pub fn jump_1d(p: &Jump1dParams) -> ProblemSpec {
    let domain = BoxDomain::volume_box(vec![0.0], vec![1.0]).expect("unit interval");
    let Jump1dParams {
        sigma,
        lambda,
        delta,
        ..
    } = *p;
    let kernel = JumpKernel::uniform_ball(1, delta, lambda / (2.0 * delta)).expect("interval kernel");
    let sinc = (PI * delta).sin() / (PI * delta);
    let rate = -0.5 + 0.5 * sigma * sigma * PI * PI - lambda * (sinc - 1.0);
    ProblemBuilder::new(domain, p.horizon)
        .name("jump-1d")
        .constant_sigma(vec![sigma])
        .constant_drift(vec![0.0])
        .kernel(kernel)
        .forcing(move |t, x, _| rate * (-0.5 * t).exp() * (PI * x[0]).cos())
        .forcing_du(|_, _, _| 0.0)
        .exact_solution(|t, x| (-0.5 * t).exp() * (PI * x[0]).cos() + 0.5 * x[0])
        .build()
        .expect("jump-1d preset")
}

/// Pure diffusion on a wide interval with `u = x² + σ² t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heat1dParams {
    pub sigma: f64,
    pub half_width: f64,
    pub horizon: f64,
}

impl Default for Heat1dParams {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            half_width: 20.0,
            horizon: 0.5,
        }
    }
}

pub fn heat_1d(p: &Heat1dParams) -> ProblemSpec {
    let domain = BoxDomain::volume_box(vec![-p.half_width], vec![p.half_width]).expect("interval");
    let s2 = p.sigma * p.sigma;
    ProblemBuilder::new(domain, p.horizon)
        .name("heat-1d")
        .constant_sigma(vec![p.sigma])
        .constant_drift(vec![0.0])
        .forcing_du(|_, _, _| 0.0)
        .exact_solution(move |t, x| x[0] * x[0] + s2 * t)
        .build()
        .expect("heat-1d preset")
}
