//! Gridded field snapshots and their on-disk formats.
//!
//! Binary layout (`JKSNAP1`), all little-endian:
//!
//! ```text
//! magic   7 bytes   b"JKSNAP1"
//! dims    u32
//! counts  u64 × dims          node count per axis
//! bounds  (f64, f64) × dims   first and last node coordinate per axis
//! payload f64 × Π counts      row-major, last axis fastest
//! ```
//!
//! Bounds are node coordinates, so node `i` of an axis sits at
//! `lower + i · (upper − lower) / (count − 1)` for bounded and periodic axes alike.

use std::io::{self, Read, Write};

use super::{Interpolant, TensorGrid};

pub const MAGIC: &[u8; 7] = b"JKSNAP1";

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub time: f64,
    pub counts: Vec<usize>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub values: Vec<f64>,
}

impl Snapshot {
    pub fn from_values(grid: &TensorGrid, time: f64, values: Vec<f64>) -> Self {
        let counts = grid.node_counts();
        let lower = grid.axes().iter().map(|a| a.lower).collect();
        let upper = grid.axes().iter().map(|a| a.coordinate(a.nodes - 1)).collect();
        Self {
            time,
            counts,
            lower,
            upper,
            values,
        }
    }

    pub fn from_interpolant(interp: &Interpolant, time: f64) -> Self {
        Self::from_values(interp.grid(), time, interp.values().to_vec())
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn coordinate(&self, axis: usize, i: usize) -> f64 {
        let n = self.counts[axis];
        if n < 2 {
            return self.lower[axis];
        }
        self.lower[axis] + i as f64 * (self.upper[axis] - self.lower[axis]) / (n - 1) as f64
    }

    fn point(&self, mut j: usize, out: &mut [f64]) {
        for axis in (0..self.dim()).rev() {
            let n = self.counts[axis];
            out[axis] = self.coordinate(axis, j % n);
            j /= n;
        }
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        for &n in &self.counts {
            w.write_all(&(n as u64).to_le_bytes())?;
        }
        for (lo, hi) in self.lower.iter().zip(&self.upper) {
            w.write_all(&lo.to_le_bytes())?;
            w.write_all(&hi.to_le_bytes())?;
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Read a `JKSNAP1` stream. The format carries no time stamp; the
    /// returned snapshot has `time = NaN`.
    pub fn read_binary<R: Read>(mut r: R) -> io::Result<Self> {
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "bad snapshot magic"));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let dims = u32::from_le_bytes(b4) as usize;
        let mut counts = Vec::with_capacity(dims);
        for _ in 0..dims {
            r.read_exact(&mut b8)?;
            counts.push(u64::from_le_bytes(b8) as usize);
        }
        let mut lower = Vec::with_capacity(dims);
        let mut upper = Vec::with_capacity(dims);
        for _ in 0..dims {
            r.read_exact(&mut b8)?;
            lower.push(f64::from_le_bytes(b8));
            r.read_exact(&mut b8)?;
            upper.push(f64::from_le_bytes(b8));
        }
        let total: usize = counts.iter().product();
        let mut values = Vec::with_capacity(total);
        for _ in 0..total {
            r.read_exact(&mut b8)?;
            values.push(f64::from_le_bytes(b8));
        }
        Ok(Self {
            time: f64::NAN,
            counts,
            lower,
            upper,
            values,
        })
    }

    /// One row per node: coordinates `x0..x{d-1}` then `value`.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut writer = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..self.dim()).map(|a| format!("x{a}")).collect();
        header.push("value".into());
        writer.write_record(&header)?;
        let mut x = vec![0.0; self.dim()];
        for (j, v) in self.values.iter().enumerate() {
            self.point(j, &mut x);
            let mut row: Vec<String> = x.iter().map(|c| c.to_string()).collect();
            row.push(v.to_string());
            writer.write_record(&row)?;
        }
        writer.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{AxisMode, BoxDomain};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn header_layout() {
        let snap = Snapshot {
            time: 0.0,
            counts: vec![2, 3],
            lower: vec![0.0, -1.0],
            upper: vec![1.0, 1.0],
            values: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        };
        let mut buf = Vec::new();
        snap.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..7], b"JKSNAP1");
        assert_eq!(u32::from_le_bytes(buf[7..11].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(buf[11..19].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(buf[19..27].try_into().unwrap()), 3);
        assert_eq!(f64::from_le_bytes(buf[35..43].try_into().unwrap()), 1.0);
        assert_eq!(f64::from_le_bytes(buf[43..51].try_into().unwrap()), -1.0);
        assert_eq!(buf.len(), 7 + 4 + 16 + 32 + 48);
    }

    #[test]
    fn periodic_bounds_are_node_coordinates() {
        let domain = BoxDomain::new(vec![0.0], vec![2.0 * PI], vec![AxisMode::Periodic]).unwrap();
        let grid = TensorGrid::with_intervals(&domain, &[4]).unwrap();
        let snap = Snapshot::from_values(&grid, 0.0, vec![0.0; 4]);
        assert!((snap.upper[0] - 1.5 * PI).abs() < 1e-15);
        assert!((snap.coordinate(0, 2) - PI).abs() < 1e-15);
    }

    #[test]
    fn csv_rows() {
        let domain = BoxDomain::volume_box(vec![0.0], vec![1.0]).unwrap();
        let grid = TensorGrid::with_intervals(&domain, &[4]).unwrap();
        let snap = Snapshot::from_values(&grid, 0.0, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let mut buf = Vec::new();
        snap.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("x0,value"));
        assert_eq!(text.lines().nth(2), Some("0.25,0.25"));
    }

    proptest! {
        #[test]
        fn binary_round_trip(values in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 12)) {
            let snap = Snapshot { time: f64::NAN, counts: vec![3, 4], lower: vec![0.0, 1.0], upper: vec![2.0, 5.5], values };
            let mut buf = Vec::new();
            snap.write_binary(&mut buf).unwrap();
            let back = Snapshot::read_binary(buf.as_slice()).unwrap();
            prop_assert_eq!(back.counts, snap.counts);
            prop_assert_eq!(back.lower, snap.lower);
            prop_assert_eq!(back.upper, snap.upper);
            prop_assert_eq!(back.values, snap.values);
        }
    }
}
