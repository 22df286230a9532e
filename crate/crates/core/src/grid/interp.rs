use std::sync::Arc;

use super::{AxisMode, GridError, TensorGrid, MAX_DIM};

/// Piecewise-cubic tensor Lagrange interpolant of nodal values.
///
/// Each axis uses the 4-node stencil around the evaluation point; on bounded
/// axes the stencil is shifted inward near the ends, on periodic axes indices
/// wrap.
#[derive(Debug, Clone)]
pub struct Interpolant {
    grid: Arc<TensorGrid>,
    values: Vec<f64>,
}

/// Snap tolerance (in units of the spacing) for recognising grid nodes.
const NODE_SNAP: f64 = 1e-11;

impl Interpolant {
    pub fn new(grid: Arc<TensorGrid>, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.len() {
            return Err(GridError::ValueCount {
                expected: grid.len(),
                got: values.len(),
            });
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: Arc<TensorGrid>, f: impl Fn(&[f64]) -> f64) -> Self {
        let mut x = vec![0.0; grid.dim()];
        let values = (0..grid.len())
            .map(|j| {
                grid.node_point(j, &mut x);
                f(&x)
            })
            .collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &Arc<TensorGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Evaluate at `x`, wrapping periodic and mirroring reflecting coordinates first.
    pub fn interpolate(&self, x: &[f64]) -> Result<f64, GridError> {
        let d = self.grid.dim();
        if x.len() != d {
            return Err(GridError::DimensionMismatch {
                expected: d,
                got: x.len(),
            });
        }
        let mut y = [0.0; MAX_DIM];
        y[..d].copy_from_slice(x);
        let domain = self.grid.domain();
        domain.fold(&mut y[..d]);
        for axis in 0..d {
            if domain.modes()[axis].is_periodic() {
                continue;
            }
            let tol = 1e-12 * domain.extent(axis);
            if y[axis] < domain.lower()[axis] - tol || y[axis] > domain.upper()[axis] + tol {
                return Err(GridError::OutOfDomain {
                    axis,
                    point: x.to_vec(),
                });
            }
        }
        Ok(self.interpolate_folded(&y[..d]))
    }

    /// Evaluate at an already folded point inside `D̄` (coordinates slightly
    /// outside bounded axes are clamped onto the end cells).
    pub(crate) fn interpolate_folded(&self, x: &[f64]) -> f64 {
        let d = self.grid.dim();
        let mut offsets = [[0usize; 4]; MAX_DIM];
        let mut weights = [[0.0f64; 4]; MAX_DIM];
        for (a, axis) in self.grid.axes().iter().enumerate() {
            let n = axis.nodes;
            let stride = self.grid.strides()[a];
            let mut s = (x[a] - axis.lower) / axis.spacing;
            let r = s.round();
            if (s - r).abs() <= NODE_SNAP {
                s = r;
            }
            match axis.mode {
                AxisMode::Periodic => {
                    let mut cell = s.floor();
                    if cell >= n as f64 {
                        s -= n as f64;
                        cell -= n as f64;
                    } else if cell < 0.0 {
                        s += n as f64;
                        cell += n as f64;
                    }
                    let start = cell as isize - 1;
                    lagrange_weights(s - start as f64, &mut weights[a]);
                    for k in 0..4 {
                        let i = (start + k as isize).rem_euclid(n as isize) as usize;
                        offsets[a][k] = i * stride;
                    }
                }
                AxisMode::Bounded { .. } => {
                    let cell = (s.floor().max(0.0) as usize).min(n - 2);
                    let start = cell.saturating_sub(1).min(n - 4);
                    lagrange_weights(s - start as f64, &mut weights[a]);
                    for k in 0..4 {
                        offsets[a][k] = (start + k) * stride;
                    }
                }
            }
        }
        accumulate(&self.values, &offsets[..d], &weights[..d], 0)
    }
}

#[inline]
fn accumulate(values: &[f64], offsets: &[[usize; 4]], weights: &[[f64; 4]], base: usize) -> f64 {
    if offsets.len() == 1 {
        let o = &offsets[0];
        let w = &weights[0];
        return w[0] * values[base + o[0]]
            + w[1] * values[base + o[1]]
            + w[2] * values[base + o[2]]
            + w[3] * values[base + o[3]];
    }
    let mut sum = 0.0;
    for k in 0..4 {
        let w = weights[0][k];
        if w != 0.0 {
            sum += w * accumulate(values, &offsets[1..], &weights[1..], base + offsets[0][k]);
        }
    }
    sum
}

/// Cubic Lagrange basis on the nodes `0, 1, 2, 3` evaluated at `xi`.
#[inline]
fn lagrange_weights(xi: f64, out: &mut [f64; 4]) {
    let a = xi;
    let b = xi - 1.0;
    let c = xi - 2.0;
    let e = xi - 3.0;
    out[0] = -(b * c * e) / 6.0;
    out[1] = a * c * e / 2.0;
    out[2] = -(a * b * e) / 2.0;
    out[3] = a * b * c / 6.0;
}

/// Value of the field at `x` and time `t`: the interpolant inside `D̄` (after
/// wrapping and reflection), the volume constraint elsewhere.
pub fn eval_field(interp: &Interpolant, volume: &dyn Fn(f64, &[f64]) -> f64, t: f64, x: &[f64]) -> f64 {
    eval_field_tracked(interp, volume, t, x).0
}

/// As [`eval_field`], also reporting whether the point fell outside `D̄`.
pub fn eval_field_tracked(interp: &Interpolant, volume: &dyn Fn(f64, &[f64]) -> f64, t: f64, x: &[f64]) -> (f64, bool) {
    let d = x.len();
    let mut y = [0.0; MAX_DIM];
    y[..d].copy_from_slice(x);
    let domain = interp.grid().domain();
    domain.fold(&mut y[..d]);
    if domain.contains_closed(&y[..d]) {
        (interp.interpolate_folded(&y[..d]), false)
    } else {
        (volume(t, &y[..d]), true)
    }
}
