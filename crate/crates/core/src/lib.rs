//! Geodesics, conjugate loci and their singularities on level-set
//! submanifolds, computed with structure-preserving (DEL, symplectic Euler,
//! KKT) and non-symplectic (explicit midpoint) discretisations.

pub mod autodiff;
pub mod bvp;
pub mod cli;
pub mod error;
pub mod export;
pub mod geometry;
pub mod integrators;
pub mod linalg;
pub mod locus;

pub use error::{Error, Result};
