//! Descriptor matching, air-ground pair filtering and EPnP+RANSAC
//! initialization of the relative camera pose.

mod candidates;
mod epnp;
mod matching;
mod ransac;

use thiserror::Error;

pub use candidates::{build_pair_candidates, pair_anchor, AerialFrame, AerialStore, GroundFrame, PairCandidate};
pub use epnp::{absolute_orientation, epnp, epnp_with_error, mean_reprojection_error, refine_pose};
pub use matching::{
    descriptor_distance, match_descriptors, normalize_descriptor, KeypointSet, LocalDescriptor, Match, MatchSet,
    LOCAL_DESCRIPTOR_DIM,
};
pub use ransac::{estimate_pose_epnp, solve_pnp_ransac, PnpEstimate};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssociationError {
    #[error("keypoint set has {pixels} pixels but {descriptors} descriptors")]
    LengthMismatch { pixels: usize, descriptors: usize },
    #[error("keypoint set is empty")]
    EmptyKeypointSet,
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("invalid pair filter config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PairFilterConfig {
    pub min_matches: usize,
    pub ratio: f32,
    pub accept_threshold: f32,
    /// Upper bound on RANSAC hypotheses.
    pub ransac_iters: usize,
    pub ransac_reproj_px: f64,
    /// Stop sampling once an all-inlier minimal sample has been drawn with
    /// this probability, given the best inlier ratio so far. 1.0 disables.
    pub ransac_confidence: f64,
    pub top_k_candidates: usize,
}

impl Default for PairFilterConfig {
    fn default() -> Self {
        Self {
            min_matches: 20,
            ratio: 0.85,
            accept_threshold: 1.0,
            ransac_iters: 500,
            ransac_reproj_px: 4.0,
            ransac_confidence: 0.999,
            top_k_candidates: 3,
        }
    }
}

impl PairFilterConfig {
    pub fn validate(&self) -> Result<(), AssociationError> {
        if self.min_matches < 4 {
            return Err(AssociationError::InvalidConfig("min_matches must be >= 4".into()));
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(AssociationError::InvalidConfig("ratio must lie in (0, 1)".into()));
        }
        if !(self.accept_threshold > 0.0) || !(self.ransac_reproj_px > 0.0) {
            return Err(AssociationError::InvalidConfig("thresholds must be positive".into()));
        }
        if !(self.ransac_confidence > 0.0 && self.ransac_confidence <= 1.0) {
            return Err(AssociationError::InvalidConfig("ransac_confidence must lie in (0, 1]".into()));
        }
        if self.ransac_iters == 0 || self.top_k_candidates == 0 {
            return Err(AssociationError::InvalidConfig("counts must be positive".into()));
        }
        Ok(())
    }
}
