//! Ground states of linear, Gross–Pitaevskii and spin-orbit-coupled
//! condensate energies by metric-driven Riemannian gradient iterations, with
//! finite element and localized orthogonal decomposition (LOD) discretizations.

pub mod assembly;
pub mod blocks;
pub mod cg;
pub mod chol;
pub mod eigen;
pub mod error;
pub mod experiment;
pub mod field;
pub mod io;
pub mod lod;
pub mod mesh;
pub mod models;
pub mod quadrature;
pub mod solvers;
pub mod verify;
pub mod space;
pub mod sparse;
pub mod vecops;

pub use error::{Error, Result};
