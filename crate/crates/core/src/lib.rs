//! Locally corrected quadrature for Laplace and Helmholtz layer potentials on
//! surfaces made of high-order curvilinear triangles.
//!
//! The pipeline is split the usual way for Nyström boundary integral codes:
//!
//! * [`basis`]: orthonormal polynomials on the reference triangle, interpolation
//!   nodes and quadrature rules.
//! * [`geometry`]: curved patches, chart jets and surface generators.
//! * [`kernels`]: Green's functions and layer-potential kernels.
//! * [`quadrature`]: self, near and far quadrature for a single patch.
//! * [`octree`]: level-restricted tree used to find near-field targets.
//! * [`eval`]: precomputation and fast application of layer potentials.
//! * [`solver`]: GMRES, the combined-field Dirichlet solve and Green's identity checks.
//! * [`cli`]: batch drivers behind the `surfquad` binary.

pub mod basis;
pub mod cli;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod kernels;
pub mod octree;
pub mod quadrature;
pub mod solver;

pub use error::{Error, Result};

/// Complex scalar used for densities and potentials.
pub type C64 = num_complex::Complex64;

/// Points and vectors in space.
pub type Vec3 = nalgebra::Vector3<f64>;
