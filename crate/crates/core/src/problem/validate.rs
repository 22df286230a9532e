use std::fmt;

use crate::grid::{AxisMode, BoxDomain, Side};
use crate::quadrature::NormalizedKernel;

use super::{half_outer, Drift, ProblemError, ProblemSpec};

/// Lattice resolution used when the kernel mass must be integrated numerically.
const KERNEL_RESOLUTION: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NonFinite {
        quantity: &'static str,
        t: f64,
        x: Vec<f64>,
    },
    NotPositiveSemidefinite {
        t: f64,
        x: Vec<f64>,
        min_eigenvalue: f64,
    },
    NegativeKernel {
        q: Vec<f64>,
        value: f64,
    },
    KernelNotIntegrable(String),
    MissingDerivative(&'static str),
    Invalid(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonFinite { quantity, t, x } => write!(f, "{quantity} is not finite at t = {t}, x = {x:?}"),
            Violation::NotPositiveSemidefinite { t, x, min_eigenvalue } => {
                write!(f, "σσᵀ has eigenvalue {min_eigenvalue:e} at t = {t}, x = {x:?}")
            }
            Violation::NegativeKernel { q, value } => write!(f, "kernel is negative ({value}) at q = {q:?}"),
            Violation::KernelNotIntegrable(msg) => write!(f, "kernel is not integrable: {msg}"),
            Violation::MissingDerivative(what) => write!(f, "missing derivative: {what}"),
            Violation::Invalid(msg) => write!(f, "{msg}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Kernel mass `λ`, when the kernel could be normalized.
    pub kernel_mass: Option<f64>,
    /// Derivative terms that will be computed by finite differences.
    pub finite_difference_terms: Vec<&'static str>,
    pub samples: usize,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// `per_axis` evenly spaced points per axis spanning the closed box.
pub fn sample_lattice(domain: &BoxDomain, per_axis: usize) -> Vec<Vec<f64>> {
    let d = domain.dim();
    let n = per_axis.max(1);
    let total = n.pow(d as u32);
    (0..total)
        .map(|mut k| {
            let mut x = vec![0.0; d];
            for a in (0..d).rev() {
                let i = k % n;
                k /= n;
                let frac = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
                x[a] = domain.lower()[a] + frac * domain.extent(a);
            }
            x
        })
        .collect()
}

/// Evaluate every coefficient of `spec` at the sample points and report
/// non-finite values, indefinite diffusion, and kernel problems. Never fails.
pub fn validate(spec: &ProblemSpec, t_samples: &[f64], x_samples: &[Vec<f64>]) -> ValidationReport {
    let d = spec.dim();
    let mut report = ValidationReport::default();
    let push_nonfinite = |report: &mut ValidationReport, quantity, t, x: &[f64]| {
        report.violations.push(Violation::NonFinite {
            quantity,
            t,
            x: x.to_vec(),
        });
    };

    match spec.to_nondivergence() {
        Ok(eff) => report.finite_difference_terms = eff.finite_difference_terms().to_vec(),
        Err(ProblemError::MissingDerivative(what)) => report.violations.push(Violation::MissingDerivative(what)),
        Err(e) => report.violations.push(Violation::Invalid(e.to_string())),
    }

    let q_samples = kernel_samples(spec, &mut report);
    let mut vec_d = vec![0.0; d];
    let mut mat = vec![0.0; d * d];
    let mut k = vec![0.0; d * d];

    for &t in t_samples {
        for x in x_samples {
            report.samples += 1;
            match spec.drift() {
                Drift::Divergence { field, divergence } => {
                    field(t, x, &mut vec_d);
                    if !all_finite(&vec_d) {
                        push_nonfinite(&mut report, "drift B", t, x);
                    }
                    if let Some(div) = divergence {
                        if !div(t, x).is_finite() {
                            push_nonfinite(&mut report, "divergence of B", t, x);
                        }
                    }
                }
                Drift::NonDivergence(b) => {
                    b(t, x, &mut vec_d);
                    if !all_finite(&vec_d) {
                        push_nonfinite(&mut report, "drift b", t, x);
                    }
                }
            }

            spec.sigma(t, x, &mut mat);
            if !all_finite(&mat) {
                push_nonfinite(&mut report, "sigma", t, x);
            } else {
                half_outer(&mat, d, &mut k);
                let trace: f64 = (0..d).map(|i| k[i * d + i]).sum();
                let min = symmetric_eigenvalues(&k, d).into_iter().fold(f64::INFINITY, f64::min);
                if min < -1e-12 * trace.abs().max(1.0) {
                    report.violations.push(Violation::NotPositiveSemidefinite {
                        t,
                        x: x.clone(),
                        min_eigenvalue: min,
                    });
                }
            }

            if let Some(derivs) = spec.diffusion_derivatives() {
                (derivs.first)(t, x, &mut vec_d);
                if !all_finite(&vec_d) || !(derivs.second)(t, x).is_finite() {
                    push_nonfinite(&mut report, "derivatives of K", t, x);
                }
            }

            if q_samples.iter().any(|q| {
                spec.jump_amplitude(t, x, q, &mut vec_d);
                !all_finite(&vec_d)
            }) {
                push_nonfinite(&mut report, "jump amplitude", t, x);
            }

            let u0 = spec.initial(x);
            if !u0.is_finite() {
                push_nonfinite(&mut report, "initial datum", t, x);
            }
            let probe = if u0.is_finite() { u0 } else { 0.0 };
            if !spec.forcing(t, x, 0.0).is_finite() || !spec.forcing(t, x, probe).is_finite() {
                push_nonfinite(&mut report, "forcing", t, x);
            }

            for y in exterior_points(spec.domain(), x) {
                if !spec.volume(t, &y).is_finite() {
                    push_nonfinite(&mut report, "volume constraint", t, &y);
                }
            }
        }
    }
    report
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Check the kernel and return a few jump variables inside its support.
fn kernel_samples(spec: &ProblemSpec, report: &mut ValidationReport) -> Vec<Vec<f64>> {
    let Some(kernel) = spec.kernel() else {
        report.kernel_mass = Some(0.0);
        return vec![vec![0.0; 1]];
    };
    match NormalizedKernel::from_kernel(kernel.clone(), KERNEL_RESOLUTION) {
        Ok(nk) => report.kernel_mass = Some(nk.lambda),
        Err(e) => report.violations.push(Violation::KernelNotIntegrable(e.to_string())),
    }
    let m = kernel.dim();
    let n = 5usize;
    let mut samples = Vec::new();
    for k in 0..n.pow(m as u32) {
        let mut rest = k;
        let q: Vec<f64> = (0..m)
            .map(|a| {
                let i = rest % n;
                rest /= n;
                kernel.lower()[a] + (kernel.upper()[a] - kernel.lower()[a]) * i as f64 / (n - 1) as f64
            })
            .collect();
        if !kernel.contains(&q) {
            continue;
        }
        let value = kernel.gamma(&q);
        if !value.is_finite() {
            report.violations.push(Violation::KernelNotIntegrable(format!("γ({q:?}) = {value}")));
        } else if value < 0.0 {
            report.violations.push(Violation::NegativeKernel { q: q.clone(), value });
        }
        samples.push(q);
    }
    samples
}

/// Points just outside each volume side, level with `x`.
fn exterior_points(domain: &BoxDomain, x: &[f64]) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for (a, mode) in domain.modes().iter().enumerate() {
        if let AxisMode::Bounded { lower, upper } = *mode {
            let gap = 0.1 * domain.extent(a);
            if lower == Side::Volume {
                let mut y = x.to_vec();
                y[a] = domain.lower()[a] - gap;
                out.push(y);
            }
            if upper == Side::Volume {
                let mut y = x.to_vec();
                y[a] = domain.upper()[a] + gap;
                out.push(y);
            }
        }
    }
    out
}

/// Eigenvalues of a small symmetric matrix by cyclic Jacobi rotations.
pub(crate) fn symmetric_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    for _sweep in 0..64 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i * n + i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::presets;
    use crate::problem::{DiffusionDerivatives, ProblemBuilder};

    #[test]
    fn jacobi_eigenvalues() {
        let mut ev = symmetric_eigenvalues(&[2.0, 1.0, 1.0, 2.0], 2);
        ev.sort_by(f64::total_cmp);
        assert!((ev[0] - 1.0).abs() < 1e-14 && (ev[1] - 3.0).abs() < 1e-14);
        let mut ev = symmetric_eigenvalues(&[4.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 2.0], 3);
        ev.sort_by(f64::total_cmp);
        assert!((ev.iter().sum::<f64>() - 9.0).abs() < 1e-12);
        assert!((ev[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn example1_is_clean() {
        let spec = presets::example1(0.3);
        let xs = sample_lattice(spec.domain(), 5);
        assert_eq!(xs.len(), 125);
        let report = validate(&spec, &[0.0, 0.25, 0.5], &xs);
        assert!(report.is_clean(), "{:?}", report.violations);
        assert!((report.kernel_mass.unwrap() - 4.0 * std::f64::consts::PI / 3.0).abs() < 1e-12);
        assert!(report.finite_difference_terms.is_empty());
    }

    #[test]
    fn injected_nan_sigma() {
        let domain = BoxDomain::volume_box(vec![0.0], vec![1.0]).unwrap();
        let spec = ProblemBuilder::new(domain.clone(), 1.0)
            .sigma(|_, x, out| out[0] = if x[0] == 0.5 { f64::NAN } else { 1.0 })
            .diffusion_derivatives(DiffusionDerivatives::zero())
            .build()
            .unwrap();
        let report = validate(&spec, &[0.0], &sample_lattice(&domain, 5));
        assert_eq!(report.violations.len(), 1);
        assert!(matches!(
            &report.violations[0],
            Violation::NonFinite { quantity: "sigma", .. }
        ));
    }

    #[test]
    fn antisymmetric_sigma_passes_psd() {
        let domain = BoxDomain::volume_box(vec![0.0; 2], vec![1.0; 2]).unwrap();
        let spec = ProblemBuilder::new(domain.clone(), 1.0)
            .constant_sigma_matrix(vec![0.0, 2.0, -2.0, 0.0])
            .build()
            .unwrap();
        let report = validate(&spec, &[0.0, 1.0], &sample_lattice(&domain, 3));
        assert!(report.is_clean(), "{:?}", report.violations);
    }

    #[test]
    fn fd_fallback_is_reported() {
        let domain = BoxDomain::volume_box(vec![0.0], vec![1.0]).unwrap();
        let spec = ProblemBuilder::new(domain.clone(), 1.0)
            .constant_drift(vec![0.0])
            .sigma(|_, x, out| out[0] = x[0])
            .finite_difference(crate::problem::FiniteDifference {
                enabled: true,
                relative_step: 1e-4,
            })
            .build()
            .unwrap();
        let report = validate(&spec, &[0.0], &sample_lattice(&domain, 3));
        assert_eq!(report.finite_difference_terms, vec!["derivatives of K"]);
    }
}
