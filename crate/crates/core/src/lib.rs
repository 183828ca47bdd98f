//! Relative localization between an aerial and a ground robot from sparse
//! keypoint packets, a LiDAR voxel map and a two-stage bundle adjustment.

pub mod association;
pub mod geometry;
pub mod harness;
pub mod optimizer;
pub mod place_index;
pub mod protocol;
pub mod simkit;
pub mod voxel_map;

pub use association::{PairCandidate, PairFilterConfig};
pub use geometry::{CameraIntrinsics, RelPose4, RigidTransform, RobustNorm};
pub use harness::{ablate, run_pipeline, HarnessError, MetricsReport, Mode, RunConfig};
pub use optimizer::SolverConfig;
pub use place_index::{GlobalDescriptor, HnswIndex, HnswParams, KeyframeId};
pub use protocol::{bandwidth, BandwidthReport, FramePacket, Source};
pub use simkit::{generate, NoiseModel, Preset, Scenario, SimConfig};
pub use voxel_map::{RayCastConfig, VoxelMap};
