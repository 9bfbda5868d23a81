//! Unified extraction of vector structures (building outlines, road
//! boundaries, center lines) from rasters, with a deterministic feature
//! stand-in, a structured query encoder and decoder, point-level matching
//! and losses, and evaluation metrics.

pub mod assignment;
pub mod decoder;
pub mod deformable;
pub mod dsc;
pub mod encoder;
pub mod error;
pub mod features;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod sampling;
pub mod scene_io;
pub mod selftest;

pub use error::{Error, Result};
pub use model::{BBox, ClassTable, Config, Point, Scene, StructureKind, VectorInstance};
