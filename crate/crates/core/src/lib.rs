//! Monotonic implicit field (MIF) fitting for LiDAR mapping.
//!
//! The pipeline takes posed range scans, samples training points along each
//! ray, fits a neural field (positional encoding + hierarchical latent octree +
//! weight-normalized MLP) under surface, sign, monotonicity and eikonal losses,
//! extracts the zero level-set with marching cubes and scores the result
//! against a reference mesh.
//!
//! Data-parallel inner loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and falls back to plain iterators otherwise.

pub mod decoder;
pub mod error;
pub mod evalmetrics;
pub mod geometry;
pub mod ingest;
pub mod meshing;
pub mod octree;
pub mod par;
pub mod pipeline;
pub mod sampler;
pub mod simlidar;
pub mod spatial;
pub mod training;

pub(crate) mod binio;
mod mc_tables;
mod ply;

pub use error::{MifError, Result};
pub use geometry::{Aabb, Mat3, Point3, Pose, Ray};
