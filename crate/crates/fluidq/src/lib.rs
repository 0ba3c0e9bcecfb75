//! Growing open Jackson networks: exact event simulation, kernel reflection
//! operators, fluid limits, and convergence studies.
//!
//! The crate is organized around six pieces:
//!
//! - [`operators`]: kernels on the unit square as `L_1` integral operators —
//!   construction, algebra, norms, spectral radius, Neumann inverse, and
//!   reflection-class certification.
//! - [`skorokhod`]: the reflection problem `Z = X + (1 - F) Y` with minimal
//!   increasing regulator `Y`, solved by monotone fixed-point iteration for
//!   both discretized fields and finite station vectors.
//! - [`network`]: continuous-time simulation of open Jackson networks and
//!   fluid scaling of the sampled trajectories.
//! - [`fluid`]: the deterministic fluid system built from a kernel, the
//!   noise-free intermediate system of a finite network, and lifting and
//!   coupling-error functionals connecting the two.
//! - [`measures`]: path-space measures with finite support, the exact
//!   Wasserstein-1 distance under the uniform path metric, and Lipschitz
//!   path functionals.
//! - [`harness`]: convergence studies across network sizes with rate fitting
//!   and bound verification, plus NDJSON/CSV reporting.

pub mod fluid;
pub mod harness;
pub mod measures;
pub mod network;
pub mod operators;
pub mod path;
pub mod profile;
pub mod skorokhod;

pub use operators::{ContractionCertificate, Kernel, KernelSpec, ReflectionVerdict};
pub use path::{PathField, TimeGrid};
pub use profile::Profile;
