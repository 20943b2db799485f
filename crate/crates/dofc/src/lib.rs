//! Decentralized fixed-order dynamic output-feedback consensus toolkit.
//!
//! The crate synthesizes non-fragile output-feedback controllers that drive a
//! network of nonlinear agents to state consensus, by assembling a linear
//! matrix inequality problem over the Laplacian-reduced closed loop, solving
//! it with a conic solver, and verifying the result by eigenvalue checks and
//! nonlinear closed-loop simulation.
//!
//! Modules:
//! - [`matgraph`]: dense linear-algebra and graph-Laplacian kernels
//! - [`model`]: agent dynamics, nonlinearity bounds, controller structure
//! - [`reduction`]: consensus-to-stabilization coordinate change
//! - [`sdp`]: solver-agnostic LMI pencils and the conic backend
//! - [`synthesis`]: LMI assembly, solve, controller recovery
//! - [`sim`]: seeded nonlinear closed-loop integration
//! - [`analysis`]: consensus/dissipation/control-effort metrics
//! - [`config`]: run configuration schema for the CLI
//! - [`demo`]: the bundled flexible-joint manipulator example

pub mod analysis;
pub mod config;
pub mod demo;
pub mod matgraph;
pub mod model;
pub mod reduction;
pub mod sdp;
pub mod sim;
pub mod synthesis;

use nalgebra::RealField;
use simba::scalar::{SubsetOf, SupersetOf};

pub use nalgebra::{DMatrix, DVector};

/// Scalar type the numerical core is generic over.
///
/// `f32` and `f64` satisfy the bounds; concrete aliases below fix `f64` for
/// the CLI-facing surface.
pub trait Scalar: RealField + SupersetOf<f64> + SubsetOf<f64> + Copy {}
impl<T: RealField + SupersetOf<f64> + SubsetOf<f64> + Copy> Scalar for T {}

/// Convert an `f64` literal into the working scalar type.
#[inline]
pub fn s<T: Scalar>(x: f64) -> T {
    nalgebra::convert(x)
}

/// Convert a working scalar back to `f64` (exact for f32/f64).
#[inline]
pub fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_superset()
}

/// Default relative tolerance for rank decisions and residual checks.
pub const DEFAULT_REL_TOL: f64 = 1e-9;

/// Concrete matrix type used by the CLI and file formats.
pub type Matrix = DMatrix<f64>;
/// Concrete vector type used by the CLI and file formats.
pub type Vector = DVector<f64>;

mod error;
pub use error::{Error, Result};
