//! Probabilistic solver for semilinear nonlocal diffusion equations with
//! volume constraints, plus a Monte Carlo reference estimator.

pub mod cli;
pub mod grid;
pub mod problem;
pub mod quadrature;
pub mod mc_oracle;
pub mod stepper;
