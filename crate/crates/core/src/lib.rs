//! Discrete-velocity Boltzmann solver for plane Couette flow between diffuse walls.

pub mod anderson;
pub mod collision;
pub mod diagnostics;
pub mod error;
pub mod field;
pub mod grid;
pub mod io;
pub mod quadrature;
pub mod steady;
pub mod transport;
pub mod unsteady;

pub use collision::{assemble_operators, CollisionKernelSpec, CollisionOperators, Collider, MacroProjection};
pub use error::{Error, Result};
pub use field::{Field, Repr};
pub use grid::{build_velocity_grid, eval_reference, ReferenceTables, SpatialGrid, VelocityGrid};
