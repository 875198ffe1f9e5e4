//! Ground-truth side of the deformation workbench: procedural tet meshes,
//! an explicit Total Lagrangian Neo-Hookean solver, parametric instrument
//! scenarios and the trajectory dataset format.

pub mod binio;
pub mod dataset;
pub mod fem;
pub mod mesh;
pub mod scenario;
