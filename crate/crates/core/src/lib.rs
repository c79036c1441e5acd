//! Electro-quasistatic body-channel simulator.
//!
//! Pipeline: build a crossed-cylinder phantom ([`phantom`]), look up
//! complex tissue admittivities ([`tissue`]), assemble and solve the EQS
//! continuity equation on the voxel grid ([`solver`]), turn the potential
//! field into receiver voltages and path loss ([`coupling`]), drive
//! sweeps, surface maps and crossover analysis ([`scenario`]), and ingest
//! bench measurement grids for comparison ([`measure`]).

pub mod coupling;
pub mod fixtures;
pub mod measure;
pub mod phantom;
pub mod scenario;
pub mod solver;
pub mod tissue;

pub use num_complex::Complex64;
