//! Stage 2 against the best single air-ground pair, on seeded scenes with
//! pixel noise and UAV odometry noise.

use std::collections::BTreeMap;

use airground::association::{build_pair_candidates, AerialFrame, GroundFrame, KeypointSet, PairFilterConfig};
use airground::geometry::{RigidTransform, RobustNorm};
use airground::optimizer::{median_relative, stage2_refine, AerialObservation, SolverConfig, StageTwoProblem};
use airground::place_index::{GlobalDescriptor, HnswIndex, HnswParams};
use airground::protocol::FramePacket;
use airground::simkit::{generate, render_frame, Agent, NoiseModel, Scenario, SimConfig};
use nalgebra::Vector2;

fn pose(p: &FramePacket) -> RigidTransform {
    let v = p.pose.map(f64::from);
    RigidTransform::from_wxyz_translation([v[0], v[1], v[2], v[3]], [v[4], v[5], v[6]]).unwrap()
}

fn keypoints(p: &FramePacket) -> KeypointSet {
    let px = p.keypoints.iter().map(|q| Vector2::new(q[0] as f64, q[1] as f64)).collect();
    KeypointSet::new(px, p.descriptors.clone()).unwrap()
}

fn global(p: &FramePacket) -> GlobalDescriptor {
    GlobalDescriptor::new(p.global.to_vec()).unwrap()
}

/// Ground frames carry exact camera-frame points so only the UAV side is noisy.
fn ground_frame(s: &Scenario, i: usize) -> GroundFrame {
    let r = render_frame(s, Agent::Ground, i).unwrap();
    let truth_inv = r.truth.true_pose.inverse();
    GroundFrame {
        id: r.packet.frame_id,
        pose: pose(&r.packet),
        keypoints: keypoints(&r.packet),
        global: global(&r.packet),
        points_cam: r
            .truth
            .landmark_ids
            .iter()
            .map(|&id| Some(truth_inv.transform_point(&s.landmarks[id].position)))
            .collect(),
    }
}

/// Returns `(stage-2 error, best single-pair error)` in meters, or `None`
/// when no pair survives.
fn trial(seed: u64) -> Option<(f64, f64)> {
    let noise = NoiseModel {
        pixel_sigma: 0.5,
        vio_translation_sigma: 0.01,
        vio_rotation_sigma: 0.5f64.to_radians(),
        ..NoiseModel::zero()
    };
    let s = generate(&SimConfig { seed, noise, ..SimConfig::default() }).unwrap();
    let n = s.frame_count();

    let mut index = HnswIndex::new(HnswParams::default()).unwrap();
    let mut aerial = BTreeMap::new();
    for i in 0..n {
        let p = render_frame(&s, Agent::Aerial, i).unwrap().packet;
        index.insert(p.frame_id, global(&p)).unwrap();
        aerial.insert(
            p.frame_id,
            AerialFrame { id: p.frame_id, pose: pose(&p), keypoints: keypoints(&p), global: global(&p) },
        );
    }
    let window: Vec<GroundFrame> = (n.saturating_sub(6)..n).map(|i| ground_frame(&s, i)).collect();
    let pairs = build_pair_candidates(&window, &index, &aerial, &s.k_uav, &PairFilterConfig::default());
    if pairs.is_empty() {
        return None;
    }

    let truth = s.true_relative;
    let best_pair = pairs
        .iter()
        .map(|c| c.anchor.translation_error(&truth))
        .fold(f64::INFINITY, f64::min);

    let mut slot = BTreeMap::new();
    let mut problem = StageTwoProblem {
        relative: median_relative(&pairs.iter().map(|c| c.anchor).collect::<Vec<_>>()).unwrap(),
        aerial_ids: Vec::new(),
        aerial_poses: Vec::new(),
        observations: Vec::new(),
        anchors: pairs.iter().map(|c| c.anchor).collect(),
    };
    for c in &pairs {
        let a = &aerial[&c.aerial_id];
        let idx = *slot.entry(c.aerial_id).or_insert_with(|| {
            problem.aerial_ids.push(c.aerial_id);
            problem.aerial_poses.push(a.pose);
            problem.aerial_ids.len() - 1
        });
        let g = window.iter().find(|g| g.id == c.ground_id).unwrap();
        for (m, inlier) in c.matches.iter().zip(&c.inliers) {
            if *inlier {
                problem.observations.push(AerialObservation {
                    aerial: idx,
                    point: g.pose.transform_point(&g.points_cam[m.a].unwrap()),
                    pixel: a.keypoints.pixels[m.b],
                });
            }
        }
    }
    let out = stage2_refine(&problem, &s.k_uav, &RobustNorm::huber(2.0), &SolverConfig::default()).unwrap();
    Some((out.relative.translation_error(&truth), best_pair))
}

#[test]
fn stage_two_beats_the_best_single_pair() {
    let results: Vec<(f64, f64)> = (0..50).filter_map(trial).collect();
    assert_eq!(results.len(), 50, "every seed should yield pairs");
    let wins = results.iter().filter(|(s2, best)| s2 <= best).count();
    assert!(wins >= 40, "stage 2 at or below the best pair in {wins}/50 seeds: {results:?}");
}
