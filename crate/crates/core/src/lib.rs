//! Neural fields trained with stochastically preconditioned queries.
//!
//! The crate is organized bottom-up:
//!
//! - [`diffcore`]: a flat parameter store, a reverse-mode tape over vector
//!   values, Adam, gradient checking, and a binary checkpoint format.
//! - [`fields`]: coordinate-network representations (plain/Fourier/hashgrid
//!   MLPs and an interpolated grid) evaluated either on the tape or directly.
//! - [`precond`]: query perturbation with scheduled or spatially trainable
//!   noise amplitudes, plus boundary reflection and blur references.
//! - [`geometry`]: meshes, point clouds, procedural shapes, signed-distance
//!   oracles, and Chamfer distance.
//! - [`extract`]: marching squares/cubes with bisection-refined vertices.
//! - [`tasks`]: end-to-end image and SDF fitting loops producing run reports.
//!
//! All randomness flows through [`rng`], which derives independent
//! counter-based streams from a single experiment seed so that any individual
//! draw is reproducible from `(seed, purpose, step)`.

pub mod diffcore;
pub mod extract;
pub mod fields;
pub mod geometry;
pub mod precond;
pub mod rng;
pub mod tasks;
