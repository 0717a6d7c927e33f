//! Finite-volume toolbox for the stationary compressible isentropic
//! Navier-Stokes equations on staggered (MAC) Cartesian grids.
//!
//! The crate is organized around the lifecycle of a computation:
//!
//! * [`grid`] builds the staggered mesh (primal cells, per-direction face
//!   sets, dual cells and dual faces) for axis-aligned box unions in 2D/3D.
//! * [`field`] holds the discrete function spaces (piecewise constants on
//!   cells and on dual cells) and the projection / interpolation /
//!   reconstruction operators between analytic data and discrete fields.
//! * [`ops`] implements the discrete differential operators: upwind mass
//!   fluxes, divergence, gradients, Laplacians, curl, dual fluxes, inner
//!   products and norms.
//! * [`scheme`] assembles the nonlinear discrete system and its
//!   continuation-parameter variants (residuals and Picard linearizations).
//! * [`solver`] drives the homotopy continuation with segregated Picard
//!   sweeps and produces a [`solver::SolveReport`].
//! * [`diagnostics`] is the verification harness: discrete-identity suites
//!   on random inputs, stability-constant probes and convergence studies.
//! * [`linalg`] is the small self-contained sparse/banded linear algebra
//!   layer used by the modules above.

pub mod diagnostics;
pub mod field;
pub mod grid;
pub mod linalg;
pub mod ops;
pub mod quad;
pub mod scheme;
pub mod solver;

pub use grid::{BoxSpec, DomainSpec, MacGrid};
