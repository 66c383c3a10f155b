//! Numerical solution of the Zakai equation of nonlinear filtering with mixed
//! diffusive and doubly stochastic Poisson observations.
//!
//! The unnormalized conditional density is projected onto a finite Hermite
//! (or Gaussian-bump) basis, which turns the SPDE into a linear SDE system for
//! the Fourier coefficients. That system is stepped by Euler–Maruyama or by a
//! splitting-up scheme, optionally relocating the basis as the filter moves.
//!
//! Module map:
//!
//! * [`hermite`]: Hermite polynomial tables, basis functions, closed-form
//!   moment weights and Gaussian projections.
//! * [`numerics`]: Gauss–Hermite quadrature, matrix exponential, Gram solves.
//! * [`model`]: model specification and path simulation.
//! * [`galerkin`]: coefficient matrices, steppers, moments and densities.
//! * [`adaptive`]: adaptive relocation of the basis.
//! * [`multidim`]: tensor-product bases for `d`-dimensional signals.
//! * [`reference`]: particle filter and Kalman–Bucy oracles.
//! * [`experiment`]: RMSE/EDM/EDV experiment harness.

pub mod adaptive;
pub mod error;
pub mod experiment;
pub mod galerkin;
pub mod hermite;
pub mod model;
pub mod multidim;
pub mod numerics;
pub mod reference;

pub use error::{Error, Result};
pub use galerkin::{CoefficientMatrices, FilterEstimate, FilterState, Method};
pub use hermite::{BasisFamily, BasisSpec, HermiteCoeffTable};
pub use model::{LinearModelParams, ModelSpec, PathBundle};
pub use numerics::QuadratureRule;
