//! Convergence tables and rate fits.

use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub dt: f64,
    pub dx: f64,
    pub h: f64,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "L2_error")]
    pub l2_error: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    /// Errors are relative to the RMS of the exact solution.
    pub relative: bool,
    /// False when a row failed and the table stops early.
    pub complete: bool,
}

/// Least-squares slope of `y` against `x`; `None` for fewer than two points
/// or a degenerate abscissa.
pub fn least_squares_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

impl ConvergenceReport {
    pub fn new(relative: bool) -> Self {
        Self {
            rows: Vec::new(),
            relative,
            complete: true,
        }
    }

    fn log_points(&self) -> Option<Vec<(f64, f64)>> {
        self.rows
            .iter()
            .map(|r| (r.l2_error.is_finite() && r.l2_error > 0.0).then(|| (r.dt.log2(), r.l2_error.log2())))
            .collect()
    }

    /// Slope of `log₂ error` against `log₂ dt`; needs at least three rows
    /// with finite positive errors.
    pub fn rate(&self) -> Option<f64> {
        if self.rows.len() < 3 {
            return None;
        }
        least_squares_slope(&self.log_points()?)
    }

    /// Rate between each pair of consecutive rows.
    pub fn pairwise_rates(&self) -> Vec<f64> {
        self.rows
            .windows(2)
            .map(|w| (w[0].l2_error / w[1].l2_error).log2() / (w[0].dt / w[1].dt).log2())
            .collect()
    }

    /// Errors never decrease from one row to the next.
    pub fn non_decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].l2_error >= w[0].l2_error)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut writer = csv::Writer::from_writer(w);
        if self.rows.is_empty() {
            writer.write_record(["dt", "dx", "h", "M", "L2_error", "wall_time"])?;
        }
        for row in &self.rows {
            writer.serialize(row)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, relative: bool) -> csv::Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let rows = reader.deserialize().collect::<Result<Vec<ConvergenceRow>, _>>()?;
        Ok(Self {
            rows,
            relative,
            complete: true,
        })
    }

    /// Fixed-width table with pairwise and fitted rates.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let label = if self.relative { "rel_L2_error" } else { "L2_error" };
        let _ = writeln!(
            s,
            "{:>12} {:>10} {:>10} {:>3} {:>13} {:>8} {:>10}",
            "dt", "dx", "h", "M", label, "rate", "wall[s]"
        );
        let pairwise = self.pairwise_rates();
        for (i, r) in self.rows.iter().enumerate() {
            let rate = if i == 0 {
                "-".to_string()
            } else {
                format!("{:.4}", pairwise[i - 1])
            };
            let _ = writeln!(
                s,
                "{:>12.6e} {:>10.5} {:>10.5} {:>3} {:>13.5e} {:>8} {:>10.2}",
                r.dt, r.dx, r.h, r.m, r.l2_error, rate, r.wall_time
            );
        }
        match self.rate() {
            Some(rate) => {
                let _ = writeln!(s, "fitted rate: {rate:.4}");
            }
            None => {
                let _ = writeln!(s, "fitted rate: n/a (needs 3 rows)");
            }
        }
        if !self.complete {
            let _ = writeln!(s, "table incomplete: a row failed");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(c: f64, p: f64) -> ConvergenceReport {
        let mut report = ConvergenceReport::new(false);
        for k in 4..=7 {
            let dt = 0.5f64.powi(k);
            report.rows.push(ConvergenceRow {
                dt,
                dx: dt.sqrt(),
                h: dt.sqrt(),
                m: 2,
                l2_error: c * dt.powf(p),
                wall_time: 0.125 * k as f64,
            });
        }
        report
    }

    #[test]
    fn linear_data_gives_unit_slope() {
        let report = synthetic(3.7, 1.0);
        assert!((report.rate().unwrap() - 1.0).abs() < 1e-10);
        for r in report.pairwise_rates() {
            assert!((r - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn rate_needs_three_rows() {
        let mut report = synthetic(1.0, 1.0);
        report.rows.truncate(2);
        assert_eq!(report.rate(), None);
        assert_eq!(report.pairwise_rates().len(), 1);
    }

    #[test]
    fn non_finite_error_suppresses_rate() {
        let mut report = synthetic(1.0, 1.0);
        report.rows[1].l2_error = f64::NAN;
        assert_eq!(report.rate(), None);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut report = synthetic(0.1, 0.913);
        report.rows[2].wall_time = 1.0 / 3.0;
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("dt,dx,h,M,L2_error,wall_time\n"));
        let back = ConvergenceReport::read_csv(buf.as_slice(), false).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn monotonicity() {
        let mut report = synthetic(1.0, -0.25);
        assert!(report.non_decreasing());
        report.rows[3].l2_error = 0.0;
        assert!(!report.non_decreasing());
    }

    #[test]
    fn table_mentions_rate() {
        let t = synthetic(1.0, 1.0).table();
        assert!(t.contains("fitted rate: 1.0000"), "{t}");
    }
}
