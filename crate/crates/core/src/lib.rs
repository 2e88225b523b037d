//! Implicit scene completion from sparse LiDAR point clouds with locally
//! conditioned Eikonal signed-distance fields.

pub mod data;
pub mod encoder;
pub mod error;
pub mod extract;
pub mod field;
pub mod grid;
pub mod knn;
pub mod loss;
pub mod metrics;
pub mod sampler;
pub mod ply;
pub mod sparse;
pub mod trainer;

pub use error::{LodeError, Result};
pub use grid::{Coord, GridConfig, LabeledOccupancy, OccupancyVolume, PointCloud, Vec3};
