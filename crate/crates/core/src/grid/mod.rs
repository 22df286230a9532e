//! Tensor-product spatial grids over box domains.
//!
//! Each axis is either periodic or bounded; a bounded axis has a boundary
//! treatment per side (volume constraint or mirror reflection). Nodes are
//! stored in row-major order with the last axis fastest.

mod interp;
pub mod snapshot;

pub use interp::{eval_field, eval_field_tracked, Interpolant};
pub use snapshot::Snapshot;

use thiserror::Error;

use crate::problem::EffectiveCoefficients;
use crate::quadrature::QuadratureRule;

/// Largest spatial dimension handled by the grid machinery.
pub const MAX_DIM: usize = 8;

/// Minimum node count per axis required by the cubic stencil.
pub const MIN_NODES: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("spacing {dx} does not divide axis {axis} extent {extent} into an integral node count")]
    NonConformingSpacing { axis: usize, dx: f64, extent: f64 },
    #[error("axis {axis} has {nodes} nodes; the cubic stencil needs at least {MIN_NODES}")]
    TooFewNodes { axis: usize, nodes: usize },
    #[error("degenerate box on axis {axis}: [{lower}, {upper}]")]
    DegenerateBox { axis: usize, lower: f64, upper: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("dimension {0} is unsupported (1..={MAX_DIM})")]
    UnsupportedDimension(usize),
    #[error("point {point:?} lies outside the domain on axis {axis}")]
    OutOfDomain { axis: usize, point: Vec<f64> },
    #[error("value count {got} does not match grid size {expected}")]
    ValueCount { expected: usize, got: usize },
}

/// Boundary treatment of one side of a bounded axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    /// Values beyond this side come from the volume constraint.
    Volume,
    /// Points beyond this side are mirrored back (even extension).
    Reflect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisMode {
    Periodic,
    Bounded { lower: Side, upper: Side },
}

impl AxisMode {
    pub const VOLUME: AxisMode = AxisMode::Bounded {
        lower: Side::Volume,
        upper: Side::Volume,
    };

    pub fn is_periodic(self) -> bool {
        matches!(self, AxisMode::Periodic)
    }
}

/// Axis-aligned box `D` with per-axis boundary treatment.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxDomain {
    lower: Vec<f64>,
    upper: Vec<f64>,
    modes: Vec<AxisMode>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, modes: Vec<AxisMode>) -> Result<Self, GridError> {
        let dim = lower.len();
        if dim == 0 || dim > MAX_DIM {
            return Err(GridError::UnsupportedDimension(dim));
        }
        for got in [upper.len(), modes.len()] {
            if got != dim {
                return Err(GridError::DimensionMismatch { expected: dim, got });
            }
        }
        for axis in 0..dim {
            let (lo, hi) = (lower[axis], upper[axis]);
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(GridError::DegenerateBox {
                    axis,
                    lower: lo,
                    upper: hi,
                });
            }
        }
        Ok(Self { lower, upper, modes })
    }

    /// Box with volume constraints on every side.
    pub fn volume_box(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, GridError> {
        let modes = vec![AxisMode::VOLUME; lower.len()];
        Self::new(lower, upper, modes)
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

    pub fn modes(&self) -> &[AxisMode] {
        &self.modes
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.upper[axis] - self.lower[axis]
    }

    /// Wrap periodic coordinates into `[lower, upper)` and mirror coordinates
    /// across reflecting sides. Volume sides are left untouched.
    pub fn fold(&self, x: &mut [f64]) {
        for (axis, v) in x.iter_mut().enumerate() {
            let lo = self.lower[axis];
            let hi = self.upper[axis];
            let ext = hi - lo;
            match self.modes[axis] {
                AxisMode::Periodic => {
                    if *v < lo || *v >= hi {
                        *v = lo + (*v - lo).rem_euclid(ext);
                    }
                }
                AxisMode::Bounded {
                    lower: Side::Reflect,
                    upper: Side::Reflect,
                } => {
                    if *v < lo || *v > hi {
                        let p = (*v - lo).rem_euclid(2.0 * ext);
                        *v = lo + if p > ext { 2.0 * ext - p } else { p };
                    }
                }
                AxisMode::Bounded { lower, upper } => {
                    if lower == Side::Reflect && *v < lo {
                        *v = 2.0 * lo - *v;
                    }
                    if upper == Side::Reflect && *v > hi {
                        *v = 2.0 * hi - *v;
                    }
                }
            }
        }
    }

    /// True when a folded point lies in the closed box `D̄`.
    pub fn contains_closed(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .zip(&self.modes)
            .all(|((v, (lo, hi)), mode)| mode.is_periodic() || (*v >= *lo && *v <= *hi))
    }

    /// True when a folded point lies in the open domain `D`: strictly inside on
    /// every volume side. Periodic axes and reflecting sides never exclude.
    pub fn contains_open(&self, x: &[f64]) -> bool {
        x.iter().enumerate().all(|(axis, v)| match self.modes[axis] {
            AxisMode::Periodic => true,
            AxisMode::Bounded { lower, upper } => {
                let above = match lower {
                    Side::Volume => *v > self.lower[axis],
                    Side::Reflect => *v >= self.lower[axis],
                };
                let below = match upper {
                    Side::Volume => *v < self.upper[axis],
                    Side::Reflect => *v <= self.upper[axis],
                };
                above && below
            }
        })
    }
}

/// Per-node role in the time-stepping scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeClass {
    /// Solved; all Brownian abscissae stay inside `D`.
    Interior,
    /// Solved, but some Brownian abscissae leave `D` and are served by the
    /// volume constraint.
    BoundaryLayer,
    /// Lies on a volume side of `∂D`; its value is always the volume constraint.
    Constrained,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridAxis {
    pub lower: f64,
    pub spacing: f64,
    /// Logical node count (periodic axes do not repeat the upper end).
    pub nodes: usize,
    pub mode: AxisMode,
}

impl GridAxis {
    pub fn coordinate(&self, i: usize) -> f64 {
        self.lower + i as f64 * self.spacing
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorGrid {
    domain: BoxDomain,
    axes: Vec<GridAxis>,
    strides: Vec<usize>,
    mask: Vec<NodeClass>,
}

/// Build a uniform grid whose spacing on axis `i` is `dx[i]`.
pub fn build_grid(domain: &BoxDomain, dx: &[f64]) -> Result<TensorGrid, GridError> {
    if dx.len() != domain.dim() {
        return Err(GridError::DimensionMismatch {
            expected: domain.dim(),
            got: dx.len(),
        });
    }
    let mut intervals = Vec::with_capacity(dx.len());
    for (axis, &h) in dx.iter().enumerate() {
        let extent = domain.extent(axis);
        let ratio = extent / h;
        let n = ratio.round();
        if !(h > 0.0) || !ratio.is_finite() || n < 1.0 || (ratio - n).abs() > 1e-12 * ratio.max(1.0) {
            return Err(GridError::NonConformingSpacing { axis, dx: h, extent });
        }
        intervals.push(n as usize);
    }
    TensorGrid::with_intervals(domain, &intervals)
}

/// Subinterval count closest to `extent / target`, never below the count the
/// cubic stencil needs.
pub fn snap_intervals(extent: f64, target: f64, periodic: bool) -> usize {
    let min = if periodic { MIN_NODES } else { MIN_NODES - 1 };
    ((extent / target).round() as usize).max(min)
}

impl TensorGrid {
    /// Grid with `intervals[i]` cells on axis `i`. Bounded axes get
    /// `intervals + 1` nodes, periodic axes `intervals` logical nodes.
    pub fn with_intervals(domain: &BoxDomain, intervals: &[usize]) -> Result<Self, GridError> {
        if intervals.len() != domain.dim() {
            return Err(GridError::DimensionMismatch {
                expected: domain.dim(),
                got: intervals.len(),
            });
        }
        let mut axes = Vec::with_capacity(intervals.len());
        for (axis, &n) in intervals.iter().enumerate() {
            let mode = domain.modes()[axis];
            let nodes = if mode.is_periodic() { n } else { n + 1 };
            if nodes < MIN_NODES {
                return Err(GridError::TooFewNodes { axis, nodes });
            }
            axes.push(GridAxis {
                lower: domain.lower()[axis],
                spacing: domain.extent(axis) / n as f64,
                nodes,
                mode,
            });
        }
        let mut strides = vec![1usize; axes.len()];
        for a in (0..axes.len().saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * axes[a + 1].nodes;
        }
        let len = strides[0] * axes[0].nodes;
        let mut grid = Self {
            domain: domain.clone(),
            axes,
            strides,
            mask: vec![NodeClass::Interior; len],
        };
        for j in 0..len {
            if grid.on_volume_boundary(j) {
                grid.mask[j] = NodeClass::Constrained;
            }
        }
        Ok(grid)
    }

    fn on_volume_boundary(&self, j: usize) -> bool {
        self.axes.iter().enumerate().any(|(a, axis)| {
            let i = (j / self.strides[a]) % axis.nodes;
            match axis.mode {
                AxisMode::Periodic => false,
                AxisMode::Bounded { lower, upper } => {
                    (i == 0 && lower == Side::Volume) || (i + 1 == axis.nodes && upper == Side::Volume)
                }
            }
        })
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn axes(&self) -> &[GridAxis] {
        &self.axes
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn node_counts(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.nodes).collect()
    }

    pub fn spacing(&self) -> Vec<f64> {
        self.axes.iter().map(|a| a.spacing).collect()
    }

    pub fn mask(&self) -> &[NodeClass] {
        &self.mask
    }

    pub fn class(&self, j: usize) -> NodeClass {
        self.mask[j]
    }

    /// Multi-index of flat node `j`.
    pub fn multi_index(&self, j: usize, out: &mut [usize]) {
        for (a, axis) in self.axes.iter().enumerate() {
            out[a] = (j / self.strides[a]) % axis.nodes;
        }
    }

    pub fn flat_index(&self, index: &[usize]) -> usize {
        index.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    /// Coordinates of flat node `j`.
    pub fn node_point(&self, j: usize, out: &mut [f64]) {
        for (a, axis) in self.axes.iter().enumerate() {
            out[a] = axis.coordinate((j / self.strides[a]) % axis.nodes);
        }
    }

    pub fn node_coordinates(&self, j: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        self.node_point(j, &mut x);
        x
    }

    /// Indices of nodes whose value is produced by the scheme (not the volume constraint).
    pub fn solved_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, c)| **c != NodeClass::Constrained)
            .map(|(j, _)| j)
    }
}

/// Outcome of [`classify_nodes`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassificationReport {
    /// Solved nodes with at least one Brownian abscissa outside `D`.
    pub flagged: Vec<usize>,
}

/// Mark each solved node `Interior` when every Brownian abscissa
/// `x_j + b Δt + σ √(2Δt) e_m` stays in `D`, and `BoundaryLayer` otherwise.
pub fn classify_nodes(
    grid: &mut TensorGrid,
    coefficients: &EffectiveCoefficients,
    gh_rule: &QuadratureRule,
    dt: f64,
    t: f64,
) -> ClassificationReport {
    let d = grid.dim();
    let mut x = vec![0.0; d];
    let mut drift = vec![0.0; d];
    let mut sigma = vec![0.0; d * d];
    let mut y = vec![0.0; d];
    let scale = (2.0 * dt).sqrt();
    let mut report = ClassificationReport::default();
    for j in 0..grid.len() {
        if grid.mask[j] == NodeClass::Constrained {
            continue;
        }
        grid.node_point(j, &mut x);
        coefficients.drift(t, &x, &mut drift);
        coefficients.sigma(t, &x, &mut sigma);
        let escapes = gh_rule.iter().any(|(e, _)| {
            brownian_abscissa(&x, &drift, &sigma, e, dt, scale, &mut y);
            grid.domain.fold(&mut y);
            !grid.domain.contains_open(&y)
        });
        if escapes {
            grid.mask[j] = NodeClass::BoundaryLayer;
            report.flagged.push(j);
        } else {
            grid.mask[j] = NodeClass::Interior;
        }
    }
    report
}

/// `y = x + b Δt + σ √(2Δt) e` with `σ` row-major `d × d`.
#[inline]
pub(crate) fn brownian_abscissa(x: &[f64], drift: &[f64], sigma: &[f64], e: &[f64], dt: f64, scale: f64, y: &mut [f64]) {
    let d = x.len();
    for i in 0..d {
        let row = &sigma[i * d..(i + 1) * d];
        let noise: f64 = row.iter().zip(e).map(|(s, v)| s * v).sum();
        y[i] = x[i] + drift[i] * dt + scale * noise;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{ProblemSpec, ProblemBuilder};
    use crate::quadrature::gauss_hermite;
    use std::f64::consts::PI;

    #[test]
    fn unit_interval_nodes() {
        let domain = BoxDomain::volume_box(vec![0.0], vec![1.0]).unwrap();
        let grid = build_grid(&domain, &[0.25]).unwrap();
        let xs: Vec<f64> = (0..grid.len()).map(|j| grid.node_coordinates(j)[0]).collect();
        assert_eq!(xs, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(grid.class(0), NodeClass::Constrained);
        assert_eq!(grid.class(4), NodeClass::Constrained);
        assert_eq!(grid.class(2), NodeClass::Interior);
    }

    #[test]
    fn periodic_axis_counts_logical_nodes() {
        let domain = BoxDomain::new(vec![0.0], vec![2.0 * PI], vec![AxisMode::Periodic]).unwrap();
        let grid = build_grid(&domain, &[PI / 2.0]).unwrap();
        assert_eq!(grid.len(), 4);
        assert!(grid.mask().iter().all(|c| *c == NodeClass::Interior));
    }

    #[test]
    fn cube_node_count() {
        let domain = BoxDomain::volume_box(vec![0.0; 3], vec![1.0; 3]).unwrap();
        let grid = build_grid(&domain, &[1.0 / 32.0; 3]).unwrap();
        assert_eq!(grid.len(), 33 * 33 * 33);
        assert_eq!(grid.solved_nodes().count(), 31 * 31 * 31);
    }

    #[test]
    fn non_conforming_spacing() {
        let domain = BoxDomain::volume_box(vec![0.0], vec![1.0]).unwrap();
        assert!(matches!(
            build_grid(&domain, &[0.3]),
            Err(GridError::NonConformingSpacing { .. })
        ));
        assert!(matches!(build_grid(&domain, &[0.5]), Err(GridError::TooFewNodes { .. })));
    }

    #[test]
    fn snapping() {
        assert_eq!(snap_intervals(1.0, 0.177, false), 6);
        assert_eq!(snap_intervals(1.0, 0.9, false), 3);
        assert_eq!(snap_intervals(2.0 * PI, 3.0, true), 4);
    }

    #[test]
    fn fold_wraps_and_reflects() {
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
        let mut x = [2.5 * PI, -0.5 * PI, -0.1];
        domain.fold(&mut x);
        assert!((x[0] - 0.5 * PI).abs() < 1e-14);
        assert!((x[1] - 1.5 * PI).abs() < 1e-14);
        assert!((x[2] - 0.1).abs() < 1e-15);
        assert!(domain.contains_open(&x));
        let mut y = [0.0, 0.0, 0.6];
        domain.fold(&mut y);
        assert!(!domain.contains_closed(&y));
    }

    fn heat_1d(sigma: f64) -> ProblemSpec {
        ProblemBuilder::new(BoxDomain::volume_box(vec![0.0], vec![1.0]).unwrap(), 1.0)
            .constant_sigma(vec![sigma])
            .build()
            .unwrap()
    }

    #[test]
    fn classification_zero_diffusion() {
        let spec = heat_1d(0.0);
        let coeffs = spec.to_nondivergence().unwrap();
        let domain = spec.domain().clone();
        let mut grid = build_grid(&domain, &[1.0 / 16.0]).unwrap();
        let rule = gauss_hermite(2, 1).unwrap();
        let report = classify_nodes(&mut grid, &coeffs, &rule, 1.0 / 64.0, 0.0);
        assert!(report.flagged.is_empty());
    }

    #[test]
    fn classification_boundary_layer() {
        let spec = heat_1d(1.0);
        let coeffs = spec.to_nondivergence().unwrap();
        let mut grid = build_grid(spec.domain(), &[1.0 / 20.0]).unwrap();
        let rule = gauss_hermite(2, 1).unwrap();
        let report = classify_nodes(&mut grid, &coeffs, &rule, 1.0 / 64.0, 1.0 / 64.0);
        // displacement √(2Δt)/√2 = √Δt = 0.125
        let flagged: Vec<f64> = report.flagged.iter().map(|&j| grid.node_coordinates(j)[0]).collect();
        for j in grid.solved_nodes() {
            let x = grid.node_coordinates(j)[0];
            let expect = x < 0.125 || x > 0.875;
            assert_eq!(flagged.contains(&x), expect, "x = {x}");
        }
    }
}
