//! Pure algorithmic core for hybrid clothed-human point cloud modeling.
//!
//! Near-body clothing is produced by pose-conditioned displacements applied
//! through linear blend skinning, loose garments by an LBS-free patch
//! generator, and exposed skin is copied from the posed body. Everything in
//! this crate is deterministic, allocation-only and free of IO so it builds
//! without `std`; file formats and the command line live in the `avatar`
//! crate.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod body;
pub mod cutmap;
pub mod deformer;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod generator;
pub mod geometry;
pub mod linalg;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{BaryRecord, PointCloudN, TriMesh};
pub use linalg::{Mat3, Vec3};
