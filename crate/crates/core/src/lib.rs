//! Geolocation as classification over adaptive spherical geocells.
//!
//! - [`sphere`]: cube-face quad-tree cells, containment, centers, areas, distances.
//! - [`partition`]: adaptive partitioning into the class space.
//! - [`dataset`]: photo records, albums, splitting, near-duplicate filtering, synthetic data.
//! - [`classifier`]: single-image softmax head trained with AdaGrad.
//! - [`sequence`]: LSTM album models and the averaging baseline.
//! - [`eval`]: distance-threshold accuracy, top-k curves, group medians, retrieval mAP.
//! - [`bench`]: the synthetic album benchmark comparing all of the above.

pub mod bench;
pub mod classifier;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod nn;
pub mod partition;
pub mod seed;
pub mod sequence;
pub mod sphere;

pub use error::{Error, Result};
