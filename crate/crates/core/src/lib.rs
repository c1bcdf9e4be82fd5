//! Reflection-aware localization of an impulsive sound source in a known room.
//!
//! A microphone array reports the arrival direction and received energy of
//! acoustic wavefronts, but in a reverberant room many of those wavefronts
//! arrive via wall bounces, so the directions alone do not point at the
//! source. This crate recovers the source position by tracing each arrival
//! *backwards* through a voxel occupancy map of the room — re-amplifying the
//! energy that air and surfaces absorbed — and then running a particle filter
//! over the resulting ray polylines until the particle cloud collapses onto
//! the point the paths mutually explain.
//!
//! The crate is organized around that pipeline:
//!
//! - [`map`]: sparse voxel occupancy grid, ray/voxel traversal, and local
//!   surface normal estimation.
//! - [`trace`]: inverse acoustic rays — energy re-amplification, specular
//!   bounces, and full path construction.
//! - [`localize`]: Monte Carlo localization over ray paths (perturb, weight,
//!   resample) with a generalized-variance convergence test.
//! - [`sim`]: forward image-source simulator that synthesizes microphone
//!   observations from a scenario description, so the inverse pipeline can be
//!   exercised end to end without hardware.
//! - [`scenario`]: on-disk scenario description (room geometry, source
//!   trajectory, acoustic constants).
//! - [`runner`]: frame loop, report/CSV emission, and parameter sweeps used
//!   by the `echoloc` binary.
//!
//! All randomness flows through caller-provided seeded generators; a given
//! scenario and seed reproduces results exactly.

pub mod error;
pub mod geom;
pub mod localize;
pub mod map;
pub mod runner;
pub mod scenario;
pub mod sim;
pub mod trace;

pub use error::{Error, Result};
pub use geom::{Aabb, Point3d, UnitVec3, Vec3d};
