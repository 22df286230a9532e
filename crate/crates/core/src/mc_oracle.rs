//! Monte Carlo estimator of the Feynman–Kac representation for problems
//! whose forcing does not depend on `u`.
//!
//! A path starts at `(t, x)` and runs backward in time with Euler–Maruyama
//! substeps of the effective dynamics `dX = b ds + σ dW` plus compound
//! Poisson jumps `X ← X + c(s, X, q)`, `q ∼ γ/λ`. The value of a path is
//!
//! ```text
//! φ_v(τ, X_τ)  if the path leaves D at backward time τ > 0,
//! φ₀(X_0)      otherwise,
//! ```
//!
//! plus the left-rectangle integral of `g(s, X_s, 0)` along the path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::grid::MAX_DIM;
use crate::problem::{EffectiveCoefficients, ProblemError, ProblemSpec};
use crate::quadrature::{NormalizedKernel, QuadratureError};

/// Consecutive rejections after which jump sampling gives up.
pub const MAX_REJECTIONS: usize = 1_000_000;
/// Lattice points per axis used to bound the kernel for rejection sampling.
const SUP_LATTICE: usize = 64;
const SUP_SAFETY: f64 = 1.1;
/// Lattice resolution for kernels without a recorded mass.
const KERNEL_RESOLUTION: usize = 64;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid path configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error("jump sampling stalled after {MAX_REJECTIONS} consecutive rejections")]
    RejectionStall,
    #[error("forcing depends on u (g(t, x, 0) ≠ g(t, x, 1) at t = {t}, x = {x:?}); the estimator needs linear-mode forcing")]
    NonlinearForcing { t: f64, x: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PathConfig {
    pub n_paths: usize,
    pub euler_dt: f64,
    pub seed: u64,
    pub antithetic: bool,
}

impl PathConfig {
    fn check(&self) -> Result<(), OracleError> {
        if self.n_paths == 0 {
            return Err(OracleError::Config("n_paths must be at least 1".into()));
        }
        if !(self.euler_dt > 0.0 && self.euler_dt.is_finite()) {
            return Err(OracleError::Config(format!("euler_dt must be positive, got {}", self.euler_dt)));
        }
        Ok(())
    }
}

/// Where a path ended and what it collected.
#[derive(Debug, Clone, PartialEq)]
pub struct PathOutcome {
    /// Backward time at which the path stopped: the exit time, or 0.
    pub time: f64,
    pub point: Vec<f64>,
    pub exited: bool,
    /// `∫ g(s, X_s, 0) ds` by left rectangles.
    pub forcing_integral: f64,
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    /// Independent samples (antithetic pairs count once).
    pub samples: usize,
    pub exits: usize,
}

/// Draws jump variables from `φ = γ / λ` by rejection against the bounding box.
#[derive(Debug, Clone)]
pub struct JumpSampler {
    kernel: NormalizedKernel,
    bound: f64,
}

impl JumpSampler {
    pub fn new(kernel: NormalizedKernel) -> Self {
        let bound = SUP_SAFETY * kernel.kernel.lattice_sup(SUP_LATTICE);
        Self { kernel, bound }
    }

    pub fn lambda(&self) -> f64 {
        self.kernel.lambda
    }

    pub fn dim(&self) -> usize {
        self.kernel.kernel.dim()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R, q: &mut [f64]) -> Result<(), OracleError> {
        let k = &self.kernel.kernel;
        for _ in 0..MAX_REJECTIONS {
            for (a, v) in q.iter_mut().enumerate() {
                *v = rng.random_range(k.lower()[a]..=k.upper()[a]);
            }
            let accept: f64 = rng.random();
            if accept * self.bound < k.masked(q) {
                return Ok(());
            }
        }
        Err(OracleError::RejectionStall)
    }
}

/// Knuth's multiplication method; adequate for the small means `λ · euler_dt`.
fn poisson_count<R: Rng>(rng: &mut R, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    let limit = (-mean).exp();
    let mut k = 0;
    let mut p: f64 = rng.random();
    while p > limit {
        k += 1;
        p *= rng.random::<f64>();
    }
    k
}

/// A problem prepared for path simulation.
pub struct Oracle {
    spec: ProblemSpec,
    coefficients: EffectiveCoefficients,
    sampler: Option<JumpSampler>,
}

impl Oracle {
    pub fn new(spec: &ProblemSpec) -> Result<Self, OracleError> {
        let coefficients = spec.to_nondivergence()?;
        let sampler = match spec.kernel() {
            Some(k) => Some(JumpSampler::new(NormalizedKernel::from_kernel(k.clone(), KERNEL_RESOLUTION)?)),
            None => None,
        };
        Ok(Self {
            spec: spec.clone(),
            coefficients,
            sampler,
        })
    }

    /// Spot-check that `g` does not depend on `u` at the start point.
    fn check_linear(&self, t: f64, x: &[f64]) -> Result<(), OracleError> {
        let g0 = self.coefficients.g(t, x, 0.0);
        let g1 = self.coefficients.g(t, x, 1.0);
        if (g0 - g1).abs() > 1e-12 * g0.abs().max(1.0) {
            return Err(OracleError::NonlinearForcing { t, x: x.to_vec() });
        }
        Ok(())
    }

    /// Simulate one path from `(t, x)` backward to time 0. `flip` negates
    /// every Gaussian increment (the antithetic partner).
    pub fn simulate_path<R: Rng>(
        &self,
        t: f64,
        x: &[f64],
        config: &PathConfig,
        rng: &mut R,
        flip: bool,
    ) -> Result<PathOutcome, OracleError> {
        let d = x.len();
        let domain = self.spec.domain();
        let mut pos = [0.0; MAX_DIM];
        pos[..d].copy_from_slice(x);
        let mut drift = [0.0; MAX_DIM];
        let mut sigma = [0.0; MAX_DIM * MAX_DIM];
        let mut noise = [0.0; MAX_DIM];
        let mut q = [0.0; MAX_DIM];
        let mut c = [0.0; MAX_DIM];
        let sign = if flip { -1.0 } else { 1.0 };
        let mut s = t;
        let mut integral = 0.0;

        let stop = |pos: &mut [f64], s: f64, integral: f64, exited: bool| PathOutcome {
            time: s,
            point: pos.to_vec(),
            exited,
            forcing_integral: integral,
        };

        while s > 1e-14 * t.max(1.0) {
            let h = config.euler_dt.min(s);
            let p = &mut pos[..d];
            integral += h * self.coefficients.g(s, p, 0.0);
            self.coefficients.drift(s, p, &mut drift[..d]);
            self.coefficients.sigma(s, p, &mut sigma[..d * d]);
            for v in noise[..d].iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v = sign * z;
            }
            let root = h.sqrt();
            for i in 0..d {
                let row = &sigma[i * d..(i + 1) * d];
                let dw: f64 = row.iter().zip(&noise[..d]).map(|(a, b)| a * b).sum();
                p[i] += drift[i] * h + root * dw;
            }
            let s_next = s - h;
            domain.fold(p);
            if !domain.contains_open(p) {
                return Ok(stop(p, s_next, integral, true));
            }
            if let Some(sampler) = &self.sampler {
                let m = sampler.dim();
                for _ in 0..poisson_count(rng, sampler.lambda() * h) {
                    sampler.sample(rng, &mut q[..m])?;
                    self.spec.jump_amplitude(s_next, p, &q[..m], &mut c[..d]);
                    for i in 0..d {
                        p[i] += c[i];
                    }
                    domain.fold(p);
                    if !domain.contains_open(p) {
                        return Ok(stop(p, s_next, integral, true));
                    }
                }
            }
            s = s_next;
        }
        Ok(stop(&mut pos[..d], 0.0, integral, false))
    }

    fn path_value(&self, outcome: &PathOutcome) -> f64 {
        let terminal = if outcome.exited {
            self.spec.volume(outcome.time, &outcome.point)
        } else {
            self.spec.initial(&outcome.point)
        };
        terminal + outcome.forcing_integral
    }

    /// Mean and standard error of the path value over `n_paths` samples.
    /// Path `i` uses ChaCha stream `i` of the seed, so the result does not
    /// depend on scheduling.
    pub fn estimate(&self, t: f64, x: &[f64], config: &PathConfig) -> Result<Estimate, OracleError> {
        config.check()?;
        self.check_linear(t, x)?;
        let samples: Vec<Result<(f64, usize), OracleError>> = (0..config.n_paths)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(i as u64);
                if config.antithetic {
                    let mut twin = rng.clone();
                    let a = self.simulate_path(t, x, config, &mut rng, false)?;
                    let b = self.simulate_path(t, x, config, &mut twin, true)?;
                    let exits = a.exited as usize + b.exited as usize;
                    Ok((0.5 * (self.path_value(&a) + self.path_value(&b)), exits))
                } else {
                    let a = self.simulate_path(t, x, config, &mut rng, false)?;
                    Ok((self.path_value(&a), a.exited as usize))
                }
            })
            .collect();
        let mut values = Vec::with_capacity(samples.len());
        let mut exits = 0;
        for s in samples {
            let (v, e) = s?;
            values.push(v);
            exits += e;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Ok(Estimate {
            mean,
            std_error: (var / n).sqrt(),
            samples: values.len(),
            exits,
        })
    }
}

/// Convenience wrapper: prepare `spec` and estimate `u(t, x)`.
pub fn mc_estimate(spec: &ProblemSpec, t: f64, x: &[f64], config: &PathConfig) -> Result<Estimate, OracleError> {
    Oracle::new(spec)?.estimate(t, x, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::BoxDomain;
    use crate::problem::presets;
    use crate::problem::ProblemBuilder;
    use crate::quadrature::JumpKernel;

    fn config(n: usize, dt: f64) -> PathConfig {
        PathConfig {
            n_paths: n,
            euler_dt: dt,
            seed: 7,
            antithetic: false,
        }
    }

    #[test]
    fn frozen_path_collects_forcing() {
        let spec = ProblemBuilder::new(BoxDomain::volume_box(vec![0.0], vec![1.0]).unwrap(), 1.0)
            .forcing(|s, _, _| s)
            .initial(|x| x[0])
            .build()
            .unwrap();
        let oracle = Oracle::new(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = oracle.simulate_path(1.0, &[0.4], &config(1, 0.25), &mut rng, false).unwrap();
        assert_eq!(out.point, vec![0.4]);
        assert_eq!(out.time, 0.0);
        assert!(!out.exited);
        // left rectangles at s = 1, 0.75, 0.5, 0.25
        assert!((out.forcing_integral - 0.625).abs() < 1e-15);
    }

    #[test]
    fn constant_drift_is_deterministic() {
        let spec = ProblemBuilder::new(BoxDomain::volume_box(vec![-5.0], vec![5.0]).unwrap(), 1.0)
            .constant_drift(vec![0.3])
            .build()
            .unwrap();
        let oracle = Oracle::new(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = oracle.simulate_path(2.0, &[0.1], &config(1, 0.1), &mut rng, false).unwrap();
        assert!((out.point[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn large_jumps_exit() {
        let spec = ProblemBuilder::new(BoxDomain::volume_box(vec![0.0], vec![0.1]).unwrap(), 1.0)
            .kernel(JumpKernel::new(vec![5.0], vec![6.0], |_| 50.0).unwrap())
            .build()
            .unwrap();
        let oracle = Oracle::new(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = oracle.simulate_path(1.0, &[0.05], &config(1, 0.01), &mut rng, false).unwrap();
        assert!(out.exited);
        assert!(out.point[0] > 0.1);
        assert!(out.time > 0.5);
    }

    #[test]
    fn rejection_stall_is_reported() {
        let spec = ProblemBuilder::new(BoxDomain::volume_box(vec![0.0], vec![1.0]).unwrap(), 1.0)
            .kernel(
                JumpKernel::new(vec![-1.0], vec![1.0], |_| 1.0)
                    .unwrap()
                    .with_indicator(|q| q[0] == 0.123456789)
                    .with_exact_mass(1.0),
            )
            .build()
            .unwrap();
        let oracle = Oracle::new(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = oracle.sampler.as_ref().unwrap().sample(&mut rng, &mut [0.0]);
        assert!(matches!(err, Err(OracleError::RejectionStall)));
    }

    #[test]
    fn free_space_second_moment() {
        let p = presets::Heat1dParams::default();
        let spec = presets::heat_1d(&p);
        let est = mc_estimate(&spec, 0.5, &[0.7], &config(20_000, 0.05)).unwrap();
        let exact = 0.49 + p.sigma * p.sigma * 0.5;
        assert!((est.mean - exact).abs() <= 3.0 * est.std_error, "{est:?} vs {exact}");
    }

    #[test]
    fn constant_data_has_no_variance() {
        let spec = ProblemBuilder::new(BoxDomain::volume_box(vec![0.0], vec![1.0]).unwrap(), 1.0)
            .constant_sigma(vec![0.5])
            .kernel(JumpKernel::uniform_ball(1, 0.2, 2.0).unwrap())
            .initial(|_| 3.0)
            .volume(|_, _| 3.0)
            .build()
            .unwrap();
        let est = mc_estimate(&spec, 1.0, &[0.5], &config(500, 0.05)).unwrap();
        assert_eq!(est.mean, 3.0);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn seed_determinism() {
        let spec = presets::jump_1d(&presets::Jump1dParams::default());
        let a = mc_estimate(&spec, 0.5, &[0.3], &config(300, 0.02)).unwrap();
        let b = mc_estimate(&spec, 0.5, &[0.3], &config(300, 0.02)).unwrap();
        assert_eq!(a, b);
        let mut other = config(300, 0.02);
        other.seed = 8;
        assert_ne!(a.mean, mc_estimate(&spec, 0.5, &[0.3], &other).unwrap().mean);
    }

    #[test]
    fn antithetic_does_not_increase_variance() {
        let spec = presets::heat_1d(&presets::Heat1dParams::default());
        let plain = mc_estimate(&spec, 0.5, &[0.7], &config(4000, 0.05)).unwrap();
        let mut anti = config(4000, 0.05);
        anti.antithetic = true;
        let anti = mc_estimate(&spec, 0.5, &[0.7], &anti).unwrap();
        assert!(anti.std_error <= plain.std_error);
    }

    #[test]
    fn standard_error_scaling() {
        let spec = presets::heat_1d(&presets::Heat1dParams::default());
        let small = mc_estimate(&spec, 0.5, &[0.7], &config(2_000, 0.1)).unwrap();
        let large = mc_estimate(&spec, 0.5, &[0.7], &config(20_000, 0.1)).unwrap();
        let ratio = small.std_error / large.std_error;
        let expect = 10f64.sqrt();
        assert!((ratio / expect - 1.0).abs() <= 0.2, "{ratio}");
    }

    #[test]
    fn nonlinear_forcing_is_rejected() {
        let spec = presets::example1(0.3);
        assert!(matches!(
            mc_estimate(&spec, 0.5, &[0.5; 3], &config(10, 0.1)),
            Err(OracleError::NonlinearForcing { .. })
        ));
        assert!(matches!(
            mc_estimate(&presets::heat_1d(&Default::default()), 0.5, &[0.0], &config(0, 0.1)),
            Err(OracleError::Config(_))
        ));
    }
}
