use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use nalgebra::{Vector2, Vector3};

use super::report::{CycleRecord, Estimate, StageTimings};
use super::{Event, HarnessError, Mode, RunConfig};
use crate::association::{
    build_pair_candidates, match_descriptors, pair_anchor, refine_pose, AerialFrame, AerialStore, GroundFrame, KeypointSet,
    PairCandidate,
};
use crate::geometry::{CameraIntrinsics, RelPose4, RigidTransform, RobustNorm};
use crate::optimizer::{
    median_relative, stage1_refine, stage2_refine, AerialObservation, Landmark, Observation, SlidingWindow,
    StageTwoProblem, TraceRecord, WindowFrame,
};
use crate::place_index::{GlobalDescriptor, HnswIndex};
use crate::protocol::FramePacket;
use crate::simkit::ScenarioMeta;
use crate::voxel_map::VoxelMap;

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

fn packet_pose(p: &FramePacket) -> Result<RigidTransform, HarnessError> {
    let v = p.pose.map(|x| x as f64);
    RigidTransform::from_wxyz_translation([v[0], v[1], v[2], v[3]], [v[4], v[5], v[6]])
        .ok_or_else(|| HarnessError::Input(format!("frame {} carries a degenerate quaternion", p.frame_id)))
}

fn packet_keypoints(p: &FramePacket, budget: usize) -> Result<KeypointSet, HarnessError> {
    let n = p.keypoints.len().min(budget);
    KeypointSet::new(
        p.keypoints[..n].iter().map(|q| Vector2::new(q[0] as f64, q[1] as f64)).collect(),
        p.descriptors[..n].to_vec(),
    )
    .map_err(|e| HarnessError::Input(e.to_string()))
}

fn packet_global(p: &FramePacket) -> Result<GlobalDescriptor, HarnessError> {
    GlobalDescriptor::new(p.global.to_vec()).map_err(|e| HarnessError::Input(e.to_string()))
}

/// Per-trial pipeline state: the UGV's voxel map and keyframe window, the
/// UAV keyframe database, and the cycle log.
pub(crate) struct Trial<'a> {
    cfg: &'a RunConfig,
    mode: Mode,
    meta: Option<ScenarioMeta>,
    map: VoxelMap,
    index: HnswIndex,
    aerial: AerialStore,
    window: Vec<GroundFrame>,
    norm: RobustNorm,
    pub cycles: Vec<CycleRecord>,
    pub trace: Vec<TraceRecord>,
    pub last_estimate: Option<RelPose4>,
}

impl<'a> Trial<'a> {
    pub fn new(cfg: &'a RunConfig, mode: Mode) -> Result<Self, HarnessError> {
        Ok(Self {
            cfg,
            mode,
            meta: None,
            map: VoxelMap::new(cfg.voxel_size),
            index: HnswIndex::new(cfg.hnsw).map_err(|e| HarnessError::Config(e.to_string()))?,
            aerial: AerialStore::new(),
            window: Vec::with_capacity(cfg.window),
            norm: RobustNorm::huber(cfg.huber_delta),
            cycles: Vec::new(),
            trace: Vec::new(),
            last_estimate: None,
        })
    }

    pub fn truth(&self) -> Option<RelPose4> {
        self.meta.as_ref().and_then(|m| m.true_relative)
    }

    fn meta(&self) -> Result<&ScenarioMeta, HarnessError> {
        self.meta
            .as_ref()
            .ok_or_else(|| HarnessError::Input("packet arrived before the metadata record".into()))
    }

    pub fn handle(&mut self, event: &Event) -> Result<(), HarnessError> {
        match event {
            Event::Meta(m) => self.meta = Some(m.clone()),
            Event::Cloud(points) => {
                self.map
                    .insert_cloud(points)
                    .map_err(|e| HarnessError::Input(e.to_string()))?;
            }
            Event::Aerial(p) => {
                let frame = AerialFrame {
                    id: p.frame_id,
                    pose: packet_pose(p)?,
                    keypoints: packet_keypoints(p, self.cfg.keypoint_budget)?,
                    global: packet_global(p)?,
                };
                self.index
                    .insert(frame.id, frame.global.clone())
                    .map_err(|e| HarnessError::Input(e.to_string()))?;
                self.aerial.insert(frame.id, frame);
            }
            Event::Ground(p) => {
                let record = self.cycle(p)?;
                self.cycles.push(record);
            }
        }
        Ok(())
    }

    fn cycle(&mut self, p: &FramePacket) -> Result<CycleRecord, HarnessError> {
        let meta = self.meta()?.clone();
        let mut timing = StageTimings::default();

        let t0 = Instant::now();
        let pose = packet_pose(p)?;
        let keypoints = packet_keypoints(p, self.cfg.keypoint_budget)?;
        let points_cam = keypoints
            .pixels
            .iter()
            .map(|px| {
                self.map
                    .pixel_to_point(&meta.k_ugv, &pose, px, &self.cfg.raycast)
                    .map_err(|e| HarnessError::Input(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if self.window.len() == self.cfg.window {
            self.window.remove(0);
        }
        self.window.push(GroundFrame {
            id: p.frame_id,
            pose,
            keypoints,
            global: packet_global(p)?,
            points_cam,
        });
        timing.preprocess_ms = ms(t0);

        let t1 = Instant::now();
        let pairs = build_pair_candidates(&self.window, &self.index, &self.aerial, &meta.k_uav, &self.cfg.pair_filter);
        timing.association_ms = ms(t1);

        let t2 = Instant::now();
        let outcome = if pairs.is_empty() {
            Ok(None)
        } else {
            self.estimate(&pairs, &meta).map(Some)
        };
        timing.optimization_ms = ms(t2);

        let (estimate, error) = match outcome {
            Ok(e) => (e, None),
            Err(e) => (None, Some(e.to_string())),
        };
        if estimate.is_some() {
            self.last_estimate = estimate;
        }
        let truth = meta.true_relative;
        let te = estimate.zip(truth).map(|(e, t)| e.translation_error(&t));
        let ye = estimate.zip(truth).map(|(e, t)| e.yaw_error(&t).abs().to_degrees());
        let success = estimate.is_some() && te.is_none_or(|e| e < self.cfg.success_threshold);
        Ok(CycleRecord {
            cycle: self.cycles.len(),
            ground_frame: p.frame_id,
            timestamp_ns: p.timestamp_ns,
            pairs: pairs.len(),
            estimate: estimate.as_ref().map(Estimate::from),
            translation_error_m: te,
            yaw_error_deg: ye,
            success,
            timing,
            error,
        })
    }

    fn estimate(&mut self, pairs: &[PairCandidate], meta: &ScenarioMeta) -> Result<RelPose4, HarnessError> {
        let anchors: Vec<RelPose4> = pairs.iter().map(|c| c.anchor).collect();
        let median = median_relative(&anchors).expect("pairs are non-empty");
        match self.mode {
            Mode::RegOnly => Ok(median),
            Mode::RegStage2 => {
                let poses: HashMap<u64, RigidTransform> = self.window.iter().map(|g| (g.id, g.pose)).collect();
                let point = |c: &PairCandidate, a: usize| {
                    let g = self.window.iter().find(|g| g.id == c.ground_id)?;
                    g.points_cam[a].map(|p| poses[&c.ground_id].transform_point(&p))
                };
                let problem = self.stage_two_problem(pairs, median, anchors, point);
                self.run_stage_two(&problem, meta)
            }
            Mode::Full => {
                let (window, lookup) = self.refine_window(meta)?;
                let refined_pose: HashMap<u64, RigidTransform> =
                    window.frames.iter().map(|f| (f.id, f.pose)).collect();
                let frame_index: HashMap<u64, usize> =
                    window.frames.iter().enumerate().map(|(i, f)| (f.id, i)).collect();
                let point = |c: &PairCandidate, a: usize| {
                    let l = lookup.get(&(frame_index[&c.ground_id], a))?;
                    Some(window.landmarks[*l].position_world(&window.frames, &meta.k_ugv))
                };
                // Per-pair anchors re-fit against the refined structure.
                let mut refined_anchors = Vec::with_capacity(pairs.len());
                for c in pairs {
                    let g_pose = refined_pose[&c.ground_id];
                    let a = &self.aerial[&c.aerial_id];
                    let inv = g_pose.inverse();
                    let (pts, pxs): (Vec<Vector3<f64>>, Vec<Vector2<f64>>) = c
                        .matches
                        .iter()
                        .zip(&c.inliers)
                        .filter(|(_, inl)| **inl)
                        .filter_map(|(m, _)| Some((inv.transform_point(&point(c, m.a)?), a.keypoints.pixels[m.b])))
                        .unzip();
                    let anchor = (pts.len() >= 6)
                        .then(|| refine_pose(&c.t_ca_cg, &pts, &pxs, &meta.k_uav, 20))
                        .and_then(|t| pair_anchor(&a.pose, &t, &g_pose));
                    refined_anchors.push(anchor.unwrap_or(c.anchor));
                }
                let init = median_relative(&refined_anchors).expect("pairs are non-empty");
                let problem = self.stage_two_problem(pairs, init, refined_anchors, point);
                self.run_stage_two(&problem, meta)
            }
        }
    }

    fn stage_two_problem(
        &self,
        pairs: &[PairCandidate],
        init: RelPose4,
        anchors: Vec<RelPose4>,
        point: impl Fn(&PairCandidate, usize) -> Option<Vector3<f64>>,
    ) -> StageTwoProblem {
        let mut slot = BTreeMap::new();
        let mut aerial_ids = Vec::new();
        let mut aerial_poses = Vec::new();
        let mut observations = Vec::new();
        for c in pairs {
            let idx = *slot.entry(c.aerial_id).or_insert_with(|| {
                aerial_ids.push(c.aerial_id);
                aerial_poses.push(self.aerial[&c.aerial_id].pose);
                aerial_ids.len() - 1
            });
            let pixels = &self.aerial[&c.aerial_id].keypoints.pixels;
            for (m, inlier) in c.matches.iter().zip(&c.inliers) {
                if !inlier {
                    continue;
                }
                if let Some(p) = point(c, m.a) {
                    observations.push(AerialObservation {
                        aerial: idx,
                        point: p,
                        pixel: pixels[m.b],
                    });
                }
            }
        }
        StageTwoProblem {
            relative: init,
            aerial_ids,
            aerial_poses,
            observations,
            anchors,
        }
    }

    fn run_stage_two(&mut self, problem: &StageTwoProblem, meta: &ScenarioMeta) -> Result<RelPose4, HarnessError> {
        let out = stage2_refine(problem, &meta.k_uav, &self.norm, &self.cfg.solver)?;
        if self.cfg.trace {
            self.trace.extend(out.trace);
        }
        Ok(out.relative)
    }

    /// Builds multi-view tracks across the UGV window by descriptor matching,
    /// initializes inverse depths from the voxel map and runs stage 1.
    /// Returns the refined window and a `(frame, keypoint) -> landmark` map.
    fn refine_window(
        &mut self,
        meta: &ScenarioMeta,
    ) -> Result<(SlidingWindow, HashMap<(usize, usize), usize>), HarnessError> {
        let k = &meta.k_ugv;
        let frames = &self.window;
        let mut window = SlidingWindow::new(self.cfg.window);
        for f in frames {
            window.frames.push(WindowFrame { id: f.id, pose: f.pose });
        }
        if frames.len() < 2 {
            return Ok((window, HashMap::new()));
        }

        let offsets: Vec<usize> = frames
            .iter()
            .scan(0, |acc, f| {
                let o = *acc;
                *acc += f.keypoints.len();
                Some(o)
            })
            .collect();
        let total = offsets.last().unwrap() + frames.last().unwrap().keypoints.len();
        let mut uf = UnionFind::new(total);
        for i in 0..frames.len() {
            for j in i + 1..frames.len() {
                if frames[i].keypoints.is_empty() || frames[j].keypoints.is_empty() {
                    continue;
                }
                let m = match_descriptors(&frames[i].keypoints, &frames[j].keypoints, &self.cfg.pair_filter)
                    .map_err(|e| HarnessError::Input(e.to_string()))?;
                for p in m.iter() {
                    uf.union(offsets[i] + p.a, offsets[j] + p.b);
                }
            }
        }
        let mut tracks: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
        for (fi, f) in frames.iter().enumerate() {
            for kp in 0..f.keypoints.len() {
                tracks.entry(uf.find(offsets[fi] + kp)).or_default().push((fi, kp));
            }
        }

        let mut lookup = HashMap::new();
        for members in tracks.values() {
            let Some((af, akp, kept)) = verify_track(frames, members, k, self.cfg.track_gate_px) else {
                continue;
            };
            let rho = 1.0 / frames[af].points_cam[akp].expect("anchor has a map point").z;
            let id = window.landmarks.len();
            window.landmarks.push(Landmark {
                anchor: af,
                anchor_pixel: frames[af].keypoints.pixels[akp],
                inv_depth: rho,
                depth_prior: Some(rho),
                observations: kept
                    .iter()
                    .map(|&(f, kp)| Observation {
                        frame: f,
                        keypoint: kp,
                        pixel: frames[f].keypoints.pixels[kp],
                    })
                    .collect(),
            });
            for &m in &kept {
                lookup.insert(m, id);
            }
        }
        if window.landmarks.is_empty() {
            return Ok((window, lookup));
        }
        let out = stage1_refine(&window, k, &self.norm, &self.cfg.solver)?;
        if self.cfg.trace {
            self.trace.extend(out.trace);
        }
        Ok((out.window, lookup))
    }
}

/// Picks the member with a map point whose world position reprojects within
/// `gate_px` of the most other members (earliest on ties), and keeps those
/// members. `None` when fewer than two survive or a frame contributes two.
fn verify_track(
    frames: &[GroundFrame],
    members: &[(usize, usize)],
    k: &CameraIntrinsics,
    gate_px: f64,
) -> Option<(usize, usize, Vec<(usize, usize)>)> {
    let mut best: Option<(usize, usize, Vec<(usize, usize)>)> = None;
    for &(af, akp) in members {
        let Some(pc) = frames[af].points_cam[akp] else { continue };
        if !(pc.z > 0.0) {
            continue;
        }
        let world = frames[af].pose.transform_point(&pc);
        let kept: Vec<(usize, usize)> = members
            .iter()
            .copied()
            .filter(|&(f, kp)| {
                let c = frames[f].pose.inverse().transform_point(&world);
                c.z > 1e-9 && (k.project_unchecked(&c) - frames[f].keypoints.pixels[kp]).norm() <= gate_px
            })
            .collect();
        if best.as_ref().is_none_or(|b| kept.len() > b.2.len()) {
            best = Some((af, akp, kept));
        }
    }
    let (af, akp, kept) = best?;
    (kept.len() >= 2 && kept.windows(2).all(|w| w[0].0 != w[1].0)).then_some((af, akp, kept))
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// The smaller root wins, so roots do not depend on union order.
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}
