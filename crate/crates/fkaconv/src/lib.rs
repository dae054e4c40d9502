//! Point-cloud convolution with feature-kernel alignment.
//!
//! The crate bundles everything needed to train and benchmark the layer
//! on a CPU at desk scale:
//!
//! - [`autodiff`]: dense arrays with reverse-mode gradients,
//! - [`geometry`]: point clouds, k-NN search, neighborhood normalization,
//! - [`sampling`]: support-point selection strategies and the voxel-size
//!   rule, with timing reports,
//! - [`conv`]: the convolution layer itself (EMA radius, spatial gating,
//!   alignment-matrix estimation, kernel application),
//! - [`net`]: residual classification/segmentation networks,
//! - [`synth`]: seeded synthetic scenes and toy datasets,
//! - [`io`]: ASCII PLY and XYZ readers/writers,
//! - [`gradcheck`]: the finite-difference harness,
//! - [`checkpoint`]: the binary parameter container.

pub mod autodiff;
pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod net;
pub mod sampling;
pub mod synth;

pub use autodiff::{BnState, Dtype, Graph, NodeId, ParamRegistry, Real, Shape, Tensor};
pub use error::{Error, Result};
pub use geometry::{NeighborIndex, PointCloud};
