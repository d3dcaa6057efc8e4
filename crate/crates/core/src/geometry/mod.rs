//! Convex domains, uniform grids with interior/boundary classification, node
//! fields and second-order discrete calculus.

mod calculus;
mod domain;
pub mod fld;
mod field;
mod grid;
pub mod stencil;

pub use calculus::{
    cofactor, divergence, gradient, hessian, integrate, min_eigenvalue_interior, nodes_of,
    BoundaryData, DivScheme, Region, StaggeredCofactor,
};
pub use domain::{BBox, ConvexDomain, ScalarFn};
pub use field::{ScalarField, Sym2, SymMatField, VectorField};
pub use grid::{build_grid, Dir, Grid2D, NodeClass};
