//! Adversarial point-cloud toolkit: white-box attacks against a small
//! max-pooling point-set classifier, statistical-outlier-removal and
//! upsampling defenses, point-set metrics, and an experiment harness.

pub mod adam;
pub mod attacks;
pub mod checkpoint;
pub mod classifier;
pub mod cloud;
pub mod dataset;
pub mod defenses;
pub mod error;
pub mod geom;
pub mod harness;
pub mod knn;
pub mod metrics;
pub mod upsampler;

pub use cloud::{LabeledCloud, PointCloud, ShapeFamily, ShapeSpec};
pub use error::{Error, Result};
pub use geom::Point;
pub use knn::NeighborIndex;
