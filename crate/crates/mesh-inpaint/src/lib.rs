//! Self-supervised inpainting of triangular meshes.
//!
//! Given a single mesh with missing regions, the library fills the holes,
//! remeshes to uniform density, oversmooths, and then trains a graph
//! convolutional network on the mesh itself — masking random fake holes so
//! the network learns to predict vertex displacements in masked regions —
//! before snapping the known regions back with a sparse least-squares
//! refinement. No training dataset is involved: the only input is the
//! damaged mesh.

pub mod config;
pub mod error;
pub mod fixtures;
pub mod gcn;
pub mod hierarchy;
pub mod io;
pub mod losses;
pub mod mesh;
pub mod pipeline;
pub mod preprocess;
pub mod refine;
pub mod remesh;
pub mod sparse;
pub mod surface;

pub use error::{Error, Result};
pub use mesh::Mesh;
