//! Place descriptors for LiDAR scans built from second-order average pooling
//! of local features, a Log-Euclidean projection, trainable power
//! normalization and a linear projection. Includes triplet training with
//! constraint-based tuple mining, exact retrieval with recall metrics, and a
//! synthetic orchard generator for desk-scale experiments.

pub mod error;
pub mod geom;
pub mod head;
pub mod linalg;
pub mod localfeat;
pub mod retrieval;
pub mod seed;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
