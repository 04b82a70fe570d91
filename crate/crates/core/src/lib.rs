//! Camera-LiDAR cross-view fusion pipeline for 3D object detection at desk
//! scale: a float64 autodiff tensor core, KITTI-frame geometry, voxelization
//! with a stride-8 BEV backbone, auto-calibrated camera-to-BEV projection,
//! gated feature fusion, anchor-based proposal generation with RoI fusion
//! refinement, KITTI-format IO, a synthetic scene generator, and 41-point AP
//! evaluation.

pub mod cross_view;
pub mod data;
pub mod detect;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod model;
pub mod tensor;
pub mod voxel;

pub use error::{CvfError, Result};
pub use tensor::{checkpoint::ParamStore, Graph, Tensor, Var};
