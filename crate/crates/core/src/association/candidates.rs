use std::collections::BTreeMap;

use nalgebra::Vector3;

use super::{estimate_pose_epnp, match_descriptors, KeypointSet, MatchSet, PairFilterConfig};
use crate::geometry::{CameraIntrinsics, RelPose4, RigidTransform};
use crate::place_index::{GlobalDescriptor, HnswIndex, KeyframeId};

/// A UGV keyframe with per-keypoint depth from the voxel map.
#[derive(Clone, Debug)]
pub struct GroundFrame {
    pub id: KeyframeId,
    /// `T_{W_G C_G}`.
    pub pose: RigidTransform,
    pub keypoints: KeypointSet,
    pub global: GlobalDescriptor,
    /// Camera-frame point per keypoint, `None` where the ray found no surface.
    pub points_cam: Vec<Option<Vector3<f64>>>,
}

#[derive(Clone, Debug)]
pub struct AerialFrame {
    pub id: KeyframeId,
    /// `T_{W_A C_A}`.
    pub pose: RigidTransform,
    pub keypoints: KeypointSet,
    pub global: GlobalDescriptor,
}

pub type AerialStore = BTreeMap<KeyframeId, AerialFrame>;

#[derive(Clone, Debug)]
pub struct PairCandidate {
    pub ground_id: KeyframeId,
    pub aerial_id: KeyframeId,
    /// `a` indexes ground keypoints, `b` aerial keypoints.
    pub matches: MatchSet,
    /// `T_{C_A C_G}`.
    pub t_ca_cg: RigidTransform,
    pub inliers: Vec<bool>,
    /// Per-pair estimate of `T_{W_A W_G}`.
    pub anchor: RelPose4,
}

impl PairCandidate {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|b| **b).count()
    }
}

/// `T_{W_A C_A} T_{C_A C_G} T_{W_G C_G}^-1`, snapped to four degrees of freedom.
pub fn pair_anchor(
    t_wa_ca: &RigidTransform,
    t_ca_cg: &RigidTransform,
    t_wg_cg: &RigidTransform,
) -> Option<RelPose4> {
    RelPose4::from_rigid(&(t_wa_ca * t_ca_cg).compose(&t_wg_cg.inverse())).ok()
}

/// Retrieves, matches and verifies aerial partners for every ground frame.
///
/// A pair survives when it has at least `min_matches` descriptor matches and
/// at least `min_matches / 2` RANSAC inliers.
pub fn build_pair_candidates(
    window_g: &[GroundFrame],
    index: &HnswIndex,
    db: &AerialStore,
    k_a: &CameraIntrinsics,
    cfg: &PairFilterConfig,
) -> Vec<PairCandidate> {
    let mut out = Vec::new();
    if index.is_empty() {
        return out;
    }
    let min_inliers = (cfg.min_matches / 2).max(4);
    for g in window_g {
        if g.keypoints.is_empty() {
            continue;
        }
        let Ok(hits) = index.search(&g.global, cfg.top_k_candidates) else {
            continue;
        };
        for (aid, _) in hits {
            let Some(a) = db.get(&aid) else { continue };
            let Ok(matches) = match_descriptors(&g.keypoints, &a.keypoints, cfg) else {
                continue;
            };
            if matches.len() < cfg.min_matches {
                continue;
            }
            let Ok(est) = estimate_pose_epnp(&matches, &g.points_cam, &a.keypoints.pixels, k_a, cfg) else {
                continue;
            };
            if est.inlier_count() < min_inliers {
                continue;
            }
            let Some(anchor) = pair_anchor(&a.pose, &est.pose, &g.pose) else {
                continue;
            };
            out.push(PairCandidate {
                ground_id: g.id,
                aerial_id: aid,
                matches,
                t_ca_cg: est.pose,
                inliers: est.inliers,
                anchor,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::place_index::HnswParams;
    use nalgebra::UnitQuaternion;

    #[test]
    fn empty_database_gives_nothing() {
        let index = HnswIndex::new(HnswParams::default()).unwrap();
        let k = CameraIntrinsics::new(450.0, 450.0, 320.0, 240.0, 640, 480).unwrap();
        let g = GroundFrame {
            id: 0,
            pose: RigidTransform::identity(),
            keypoints: KeypointSet::default(),
            global: GlobalDescriptor::new(vec![1.0; 512]).unwrap(),
            points_cam: vec![],
        };
        assert!(build_pair_candidates(&[g], &index, &AerialStore::new(), &k, &PairFilterConfig::default()).is_empty());
    }

    #[test]
    fn anchor_composition_identity() {
        let truth = RelPose4::new(Vector3::new(1.0, -0.5, 0.3), 20f64.to_radians());
        let t_wg_cg = RigidTransform::new(UnitQuaternion::from_euler_angles(-1.5, 0.1, 0.4), Vector3::new(3.0, 1.0, 1.0));
        let t_wa_ca = RigidTransform::new(UnitQuaternion::from_euler_angles(-2.0, 0.2, -0.3), Vector3::new(0.0, 2.0, 5.0));
        // exact relative camera pose implied by the truth
        let t_ca_cg = t_wa_ca.inverse() * truth.to_rigid() * t_wg_cg;
        let got = pair_anchor(&t_wa_ca, &t_ca_cg, &t_wg_cg).unwrap();
        assert!(got.translation_error(&truth) < 1e-12);
        assert!(got.yaw_error(&truth) < 1e-12);
    }
}
