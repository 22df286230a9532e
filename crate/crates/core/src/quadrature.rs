//! Kernel normalization, Poisson event weights and the two quadrature rules
//! that realize the one-step conditional expectations.
//!
//! * [`gauss_hermite`] builds the tensor Gauss-Hermite rule for the density
//!   `ρ(ξ) = π^{-d/2} exp(-|ξ|²)` used by the Brownian (no-jump) expectation.
//! * [`jump_rule`] builds a tensor trapezoidal rule over the kernel's bounding
//!   box, masked by the kernel's support indicator and weighted by the jump
//!   density `φ = γ / λ`, for the one-jump expectation.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// Largest supported number of Gauss-Hermite points per axis.
pub const MAX_GAUSS_HERMITE_POINTS: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadratureError {
    #[error("unsupported Gauss-Hermite order {0} (supported: 1..={MAX_GAUSS_HERMITE_POINTS})")]
    UnsupportedOrder(usize),
    #[error("Gauss-Hermite Newton iteration did not converge for root {index} of order {order}")]
    RootNotConverged { order: usize, index: usize },
    #[error("degenerate kernel: integral λ = {0} is not finite and positive")]
    DegenerateKernel(f64),
    #[error("jump rule is empty: every lattice node lies outside the kernel support")]
    EmptyRule,
    #[error("invalid jump-rule mesh size {h} for axis {axis} of extent {extent}")]
    InvalidMeshSize { axis: usize, h: f64, extent: f64 },
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
}

pub type KernelFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type IndicatorFn = Arc<dyn Fn(&[f64]) -> bool + Send + Sync>;

/// Nonlocal kernel `γ(q)` over the interaction set `E ⊂ R^m`.
///
/// `E` is described by an axis-aligned bounding box plus an optional indicator
/// for non-box supports (balls, disks).
#[derive(Clone)]
pub struct JumpKernel {
    gamma: KernelFn,
    lower: Vec<f64>,
    upper: Vec<f64>,
    indicator: Option<IndicatorFn>,
    exact_mass: Option<f64>,
}

impl fmt::Debug for JumpKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("JumpKernel")
            .field("lower", &self.lower)
            .field("upper", &self.upper)
            .field("has_indicator", &self.indicator.is_some())
            .field("exact_mass", &self.exact_mass)
            .finish()
    }
}

impl JumpKernel {
    pub fn new(
        lower: Vec<f64>,
        upper: Vec<f64>,
        gamma: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Result<Self, QuadratureError> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(QuadratureError::InvalidKernel(format!(
                "bounding box dimensions disagree ({} vs {})",
                lower.len(),
                upper.len()
            )));
        }
        for (axis, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(QuadratureError::InvalidKernel(format!(
                    "axis {axis} has degenerate extent [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self {
            gamma: Arc::new(gamma),
            lower,
            upper,
            indicator: None,
            exact_mass: None,
        })
    }

    /// Restrict the support to `{q : indicator(q)}` inside the bounding box.
    pub fn with_indicator(mut self, indicator: impl Fn(&[f64]) -> bool + Send + Sync + 'static) -> Self {
        self.indicator = Some(Arc::new(indicator));
        self
    }

    /// Record the analytically known mass `λ = ∫_E γ`. Solvers prefer it over
    /// the lattice estimate, whose masking error would otherwise leave an
    /// `O(1)` floor in the event weights.
    pub fn with_exact_mass(mut self, lambda: f64) -> Self {
        self.exact_mass = Some(lambda);
        self
    }

    /// Uniform kernel `γ = scale · 1_{|q| ≤ radius}` on the Euclidean ball in `R^m`.
    pub fn uniform_ball(dim: usize, radius: f64, scale: f64) -> Result<Self, QuadratureError> {
        if !(radius > 0.0) || dim == 0 {
            return Err(QuadratureError::InvalidKernel(format!("ball radius {radius}, dim {dim}")));
        }
        let r2 = radius * radius;
        let kernel = Self::new(vec![-radius; dim], vec![radius; dim], move |_| scale)?
            .with_indicator(move |q| q.iter().map(|v| v * v).sum::<f64>() <= r2 * (1.0 + 1e-12));
        Ok(kernel.with_exact_mass(scale * ball_volume(dim, radius)))
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn exact_mass(&self) -> Option<f64> {
        self.exact_mass
    }

    pub fn gamma(&self, q: &[f64]) -> f64 {
        (self.gamma)(q)
    }

    /// True when `q` lies in the support set `E`.
    pub fn contains(&self, q: &[f64]) -> bool {
        let in_box = q
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi);
        in_box && self.indicator.as_ref().map_or(true, |ind| ind(q))
    }

    /// Masked kernel value: `γ(q)` inside `E`, zero outside.
    pub fn masked(&self, q: &[f64]) -> f64 {
        if self.contains(q) {
            (self.gamma)(q)
        } else {
            0.0
        }
    }

    /// Largest lattice value of the masked kernel on `per_axis` points per axis.
    pub fn lattice_sup(&self, per_axis: usize) -> f64 {
        let counts = vec![per_axis.max(2) - 1; self.dim()];
        let mut sup = 0.0f64;
        for_each_lattice_node(&self.lower, &self.upper, &counts, |q, _| {
            sup = sup.max(self.masked(q));
        });
        sup
    }
}

/// Volume of the Euclidean ball of the given radius in `R^dim`.
pub fn ball_volume(dim: usize, radius: f64) -> f64 {
    // V_n = π^{n/2} r^n / Γ(n/2 + 1), via the recurrence V_n = 2π r² V_{n-2} / n.
    let mut v = if dim % 2 == 0 { 1.0 } else { 2.0 * radius };
    let mut n = if dim % 2 == 0 { 0 } else { 1 };
    while n < dim {
        n += 2;
        v *= 2.0 * PI * radius * radius / n as f64;
    }
    v
}

/// A kernel together with its mass `λ`; `φ(q) = γ(q) / λ` is a probability density on `E`.
#[derive(Debug, Clone)]
pub struct NormalizedKernel {
    pub kernel: JumpKernel,
    pub lambda: f64,
}

impl NormalizedKernel {
    pub fn density(&self, q: &[f64]) -> f64 {
        self.kernel.masked(q) / self.lambda
    }

    /// Use the kernel's recorded exact mass when present, else integrate numerically.
    pub fn from_kernel(kernel: JumpKernel, resolution: usize) -> Result<Self, QuadratureError> {
        match kernel.exact_mass() {
            Some(lambda) if lambda.is_finite() && lambda > 0.0 => Ok(Self { kernel, lambda }),
            Some(lambda) => Err(QuadratureError::DegenerateKernel(lambda)),
            None => normalize_kernel(&kernel, &vec![resolution; kernel.dim()]),
        }
    }
}

/// Integrate the kernel over `E` with a tensor trapezoidal rule of
/// `resolution[i]` subintervals per axis (indicator applied at the nodes).
pub fn normalize_kernel(kernel: &JumpKernel, resolution: &[usize]) -> Result<NormalizedKernel, QuadratureError> {
    if resolution.len() != kernel.dim() || resolution.iter().any(|&n| n == 0) {
        return Err(QuadratureError::InvalidKernel(format!(
            "resolution {resolution:?} does not match kernel dimension {}",
            kernel.dim()
        )));
    }
    let lambda = trapezoid_integral(kernel, resolution);
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(QuadratureError::DegenerateKernel(lambda));
    }
    Ok(NormalizedKernel {
        kernel: kernel.clone(),
        lambda,
    })
}

/// Raw (un-renormalized) tensor trapezoidal integral of the masked kernel.
pub fn trapezoid_integral(kernel: &JumpKernel, intervals: &[usize]) -> f64 {
    let mut total = 0.0;
    for_each_lattice_node(kernel.lower(), kernel.upper(), intervals, |q, w| {
        total += w * kernel.masked(q);
    });
    total
}

/// Visit every node of the tensor trapezoidal lattice with `intervals[i]`
/// subintervals on axis `i`, passing the node and its trapezoid weight.
fn for_each_lattice_node(lower: &[f64], upper: &[f64], intervals: &[usize], mut visit: impl FnMut(&[f64], f64)) {
    let dim = lower.len();
    let steps: Vec<f64> = (0..dim).map(|a| (upper[a] - lower[a]) / intervals[a] as f64).collect();
    let mut index = vec![0usize; dim];
    let mut q = lower.to_vec();
    loop {
        let mut w = 1.0;
        for a in 0..dim {
            let edge = index[a] == 0 || index[a] == intervals[a];
            w *= if edge { 0.5 * steps[a] } else { steps[a] };
            q[a] = if index[a] == intervals[a] {
                upper[a]
            } else {
                lower[a] + index[a] as f64 * steps[a]
            };
        }
        visit(&q, w);
        let mut a = dim;
        loop {
            if a == 0 {
                return;
            }
            a -= 1;
            index[a] += 1;
            if index[a] <= intervals[a] {
                break;
            }
            index[a] = 0;
        }
    }
}

/// Probabilities of zero and exactly one Poisson event in a window of length `dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventWeights {
    pub p0: f64,
    pub p1: f64,
}

impl EventWeights {
    /// Rescale so that `p0 + p1 = 1`.
    pub fn renormalized(self) -> Self {
        let total = self.p0 + self.p1;
        Self {
            p0: self.p0 / total,
            p1: self.p1 / total,
        }
    }
}

pub fn poisson_weights(lambda: f64, dt: f64) -> EventWeights {
    let mean = lambda * dt;
    let p0 = (-mean).exp();
    EventWeights { p0, p1: mean * p0 }
}

/// Weights and abscissae of a (tensor) quadrature rule, stored flat with
/// `dim` coordinates per node.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    dim: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    normalized: bool,
}

impl QuadratureRule {
    pub fn new(dim: usize, nodes: Vec<f64>, weights: Vec<f64>, normalized: bool) -> Self {
        assert_eq!(nodes.len(), dim * weights.len(), "node/weight count mismatch");
        Self {
            dim,
            nodes,
            weights,
            normalized,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.nodes.chunks_exact(self.dim.max(1)).zip(self.weights.iter().copied())
    }

    /// `Σ_i w_i f(node_i)`.
    pub fn integrate(&self, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        self.iter().map(|(node, w)| w * f(node)).sum()
    }

    /// Drop nodes whose weight is below `relative · max weight`; the remaining
    /// weights are rescaled to the original total.
    pub fn pruned(&self, relative: f64) -> Self {
        if relative <= 0.0 || self.is_empty() {
            return self.clone();
        }
        let max = self.weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
        let total: f64 = self.weights.iter().sum();
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for (node, w) in self.iter() {
            if w.abs() >= relative * max {
                nodes.extend_from_slice(node);
                weights.push(w);
            }
        }
        let kept: f64 = weights.iter().sum();
        for w in &mut weights {
            *w *= total / kept;
        }
        Self::new(self.dim, nodes, weights, self.normalized)
    }

    /// Tensor product of `self` with itself `dim` times.
    fn tensor_power(&self, dim: usize) -> Self {
        assert_eq!(self.dim, 1);
        let m = self.len();
        let total = m.pow(dim as u32);
        let mut nodes = Vec::with_capacity(total * dim);
        let mut weights = Vec::with_capacity(total);
        let mut index = vec![0usize; dim];
        for _ in 0..total {
            let mut w = 1.0;
            for &i in &index {
                nodes.push(self.nodes[i]);
                w *= self.weights[i];
            }
            weights.push(w);
            for a in (0..dim).rev() {
                index[a] += 1;
                if index[a] < m {
                    break;
                }
                index[a] = 0;
            }
        }
        Self::new(dim, nodes, weights, self.normalized)
    }
}

/// One-dimensional `m`-point Gauss-Hermite rule for `ρ(ξ) = π^{-1/2} e^{-ξ²}`,
/// nodes ascending.
///
/// Roots of the orthonormal Hermite polynomials are located by Newton
/// iteration from the classical asymptotic initial guesses.
pub fn gauss_hermite_1d(m: usize) -> Result<QuadratureRule, QuadratureError> {
    if m == 0 || m > MAX_GAUSS_HERMITE_POINTS {
        return Err(QuadratureError::UnsupportedOrder(m));
    }
    let pim4 = PI.powf(-0.25);
    let n = m as f64;
    let mut x = vec![0.0; m];
    let mut w = vec![0.0; m];
    let half = m.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..half {
        z = match i {
            0 => (2.0 * n + 1.0).sqrt() - 1.85575 * (2.0 * n + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * n.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut converged = false;
        for _ in 0..100 {
            let (p1, p2) = orthonormal_hermite(m, z, pim4);
            let dz = p1 / ((2.0 * n).sqrt() * p2);
            z -= dz;
            if dz.abs() <= 1e-15 * z.abs().max(1.0) {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(QuadratureError::RootNotConverged { order: m, index: i });
        }
        // Refresh the derivative at the converged root.
        let (_, p2) = orthonormal_hermite(m, z, pim4);
        let pp = (2.0 * n).sqrt() * p2;
        x[i] = z;
        x[m - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[m - 1 - i] = w[i];
    }
    if m % 2 == 1 {
        x[m / 2] = 0.0;
    }
    // Weights above integrate against e^{-ξ²}; divide by √π for ρ and then
    // enforce the unit sum exactly.
    let sum: f64 = w.iter().sum();
    let weights: Vec<f64> = w.iter().map(|v| v / sum).collect();
    let mut nodes = x;
    nodes.reverse();
    let mut weights = weights;
    weights.reverse();
    Ok(QuadratureRule::new(1, nodes, weights, true))
}

/// Orthonormal Hermite polynomial values `(p_m(z), p_{m-1}(z))`.
fn orthonormal_hermite(m: usize, z: f64, pim4: f64) -> (f64, f64) {
    let mut p1 = pim4;
    let mut p2 = 0.0;
    for j in 1..=m {
        let p3 = p2;
        p2 = p1;
        let jf = j as f64;
        p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
    }
    (p1, p2)
}

/// Tensor-product Gauss-Hermite rule with `m` points per axis in `dim` dimensions.
pub fn gauss_hermite(m: usize, dim: usize) -> Result<QuadratureRule, QuadratureError> {
    if dim == 0 {
        return Err(QuadratureError::InvalidKernel("dimension must be positive".into()));
    }
    let one = gauss_hermite_1d(m)?;
    if dim == 1 {
        return Ok(one);
    }
    Ok(one.tensor_power(dim))
}

/// Whether jump-rule weights are rescaled to sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Renormalize {
    Yes,
    No,
}

/// Number of trapezoid subintervals used on an axis of the given extent for a
/// requested mesh size `h`: the smallest count whose spacing does not exceed `h`.
pub fn jump_intervals(extent: f64, h: f64) -> usize {
    ((extent / h) - 1e-9).ceil().max(1.0) as usize
}

/// Masked tensor trapezoidal rule for the one-jump expectation, renormalized
/// so that constants are reproduced exactly.
pub fn jump_rule(kernel: &NormalizedKernel, h: f64) -> Result<QuadratureRule, QuadratureError> {
    jump_rule_with(kernel, h, Renormalize::Yes)
}

pub fn jump_rule_with(kernel: &NormalizedKernel, h: f64, renormalize: Renormalize) -> Result<QuadratureRule, QuadratureError> {
    let k = &kernel.kernel;
    let dim = k.dim();
    let mut intervals = Vec::with_capacity(dim);
    for axis in 0..dim {
        let extent = k.upper()[axis] - k.lower()[axis];
        if !(h > 0.0 && h.is_finite()) || h > extent * (1.0 + 1e-12) {
            return Err(QuadratureError::InvalidMeshSize { axis, h, extent });
        }
        intervals.push(jump_intervals(extent, h));
    }
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    for_each_lattice_node(k.lower(), k.upper(), &intervals, |q, w| {
        if !k.contains(q) {
            return;
        }
        let weight = w * kernel.density(q);
        if weight != 0.0 {
            nodes.extend_from_slice(q);
            weights.push(weight);
        }
    });
    if weights.is_empty() {
        return Err(QuadratureError::EmptyRule);
    }
    if renormalize == Renormalize::Yes {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) {
            return Err(QuadratureError::EmptyRule);
        }
        for w in &mut weights {
            *w /= sum;
        }
    }
    Ok(QuadratureRule::new(dim, nodes, weights, renormalize == Renormalize::Yes))
}

/// Cell-averaged rule for convex supports with spacing exactly `h`.
///
/// The lattice is centred on the bounding box and each node owns the cell
/// `q ± h/2` clipped to the box. Cells with every corner in `E` contribute
/// their volume times the density at the cell centre. The others are sampled
/// on `subdivisions^m` midpoints and become one node at the density-weighted
/// centroid of `cell ∩ E`, carrying the sampled mass.
pub fn jump_rule_cut_cells(
    kernel: &NormalizedKernel,
    h: f64,
    subdivisions: usize,
    renormalize: Renormalize,
) -> Result<QuadratureRule, QuadratureError> {
    let k = &kernel.kernel;
    let dim = k.dim();
    if subdivisions == 0 {
        return Err(QuadratureError::InvalidKernel("cut-cell subdivisions must be positive".into()));
    }
    let mut centre = Vec::with_capacity(dim);
    let mut reach = Vec::with_capacity(dim);
    for axis in 0..dim {
        let extent = k.upper()[axis] - k.lower()[axis];
        if !(h > 0.0 && h.is_finite()) || h > extent * (1.0 + 1e-12) {
            return Err(QuadratureError::InvalidMeshSize { axis, h, extent });
        }
        centre.push(0.5 * (k.lower()[axis] + k.upper()[axis]));
        // Largest |i| whose cell still overlaps the box.
        reach.push((0.5 * extent / h + 0.5 - 1e-12).ceil() as i64 - 1);
    }
    let samples = subdivisions.pow(dim as u32);
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    let mut index: Vec<i64> = reach.iter().map(|r| -r).collect();
    let mut lo = vec![0.0; dim];
    let mut hi = vec![0.0; dim];
    let mut p = vec![0.0; dim];
    let mut centroid = vec![0.0; dim];
    loop {
        for a in 0..dim {
            let q = centre[a] + index[a] as f64 * h;
            lo[a] = (q - 0.5 * h).max(k.lower()[a]);
            hi[a] = (q + 0.5 * h).min(k.upper()[a]);
        }
        let cell: f64 = (0..dim).map(|a| hi[a] - lo[a]).product();
        let inside = (0..1usize << dim).all(|corner| {
            for a in 0..dim {
                p[a] = if corner >> a & 1 == 0 { lo[a] } else { hi[a] };
            }
            k.contains(&p)
        });
        if inside {
            for a in 0..dim {
                p[a] = 0.5 * (lo[a] + hi[a]);
            }
            let weight = cell * kernel.density(&p);
            if weight != 0.0 {
                nodes.extend_from_slice(&p);
                weights.push(weight);
            }
        } else {
            let mut mass = 0.0;
            centroid.fill(0.0);
            for s in 0..samples {
                let mut r = s;
                for a in 0..dim {
                    let i = r % subdivisions;
                    r /= subdivisions;
                    p[a] = lo[a] + (i as f64 + 0.5) / subdivisions as f64 * (hi[a] - lo[a]);
                }
                let rho = kernel.density(&p);
                if rho != 0.0 {
                    mass += rho;
                    for a in 0..dim {
                        centroid[a] += rho * p[a];
                    }
                }
            }
            if mass > 0.0 {
                nodes.extend(centroid.iter().map(|c| c / mass));
                weights.push(mass * cell / samples as f64);
            }
        }
        let mut a = dim;
        loop {
            if a == 0 {
                if weights.is_empty() {
                    return Err(QuadratureError::EmptyRule);
                }
                if renormalize == Renormalize::Yes {
                    let sum: f64 = weights.iter().sum();
                    for w in &mut weights {
                        *w /= sum;
                    }
                }
                return Ok(QuadratureRule::new(dim, nodes, weights, renormalize == Renormalize::Yes));
            }
            a -= 1;
            index[a] += 1;
            if index[a] <= reach[a] {
                break;
            }
            index[a] = -reach[a];
        }
    }
}
