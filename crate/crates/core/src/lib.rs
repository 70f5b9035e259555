//! Direct minimization of smeared Kohn-Sham free energies over orbitals and
//! pseudo-eigenvalue matrices, plus a density-mixing SCF reference solver.

pub mod block_linalg;
pub mod config;
pub mod error;
pub mod fixtures;
pub mod gradients;
pub mod lattice;
pub mod model;
pub mod optimizer;
pub mod report;
pub mod scf;
pub mod smearing;

pub use error::{Error, Result};
