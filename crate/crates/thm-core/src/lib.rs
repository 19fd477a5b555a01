//! Polytopal discontinuous Galerkin solver for the nonlinear
//! thermo-hydro-mechanical problem in four-field form
//! (displacement, pressure, temperature, total pressure).
//!
//! The crate is organized bottom-up: [`mesh`] builds polygonal meshes,
//! [`fespace`] provides broken orthonormal polynomial spaces, [`forms`]
//! assembles the weighted interior penalty operators, [`system`] composes and
//! solves the block system, [`picard`] drives the fixed-point linearization of
//! the convective term and [`mms`] supplies manufactured solutions and error
//! norms.

pub mod basis;
pub mod fespace;
pub mod forms;
pub mod krylov;
pub mod mesh;
pub mod mms;
pub mod picard;
pub mod quadrature;
pub mod real;
pub mod sparse;
pub mod system;

pub use real::Real;

/// Polygonal mesh with `f64` geometry used by the finite element layers.
pub type PolyMesh = mesh::Mesh<f64>;
/// Single precision mesh, mostly useful for quick geometric diagnostics.
pub type PolyMeshF32 = mesh::Mesh<f32>;
