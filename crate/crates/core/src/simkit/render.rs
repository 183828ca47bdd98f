use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::scene::occluded;
use super::{normalize_descriptor, quantize_pose, stream, Agent, Scenario, SimError};
use crate::geometry::{CameraIntrinsics, RelPose4, RigidTransform};
use crate::place_index::GLOBAL_DESCRIPTOR_DIM;
use crate::protocol::{FramePacket, LogRecord, LogWriter, Source};

const TAG_KEYPOINTS: u64 = 10;
const TAG_POSE: u64 = 20;
const TAG_REGION: u64 = 30;
const TAG_EMPTY_VIEW: u64 = 31;
const TAG_CLOUD: u64 = 40;

/// Nearest depth at which a landmark still counts as in front of the camera.
const MIN_DEPTH: f64 = 0.1;

fn agent_tag(agent: Agent) -> u64 {
    match agent {
        Agent::Aerial => 1,
        Agent::Ground => 2,
    }
}

/// What the renderer knows but the packet does not carry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub agent: Agent,
    pub index: usize,
    /// Camera pose in the agent's own world.
    pub true_pose: RigidTransform,
    /// Landmark index per keypoint.
    pub landmark_ids: Vec<usize>,
    /// Noiseless projection per keypoint.
    pub exact_pixels: Vec<Vector2<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFrame {
    pub packet: FramePacket,
    pub truth: FrameTruth,
}

/// Content of the `Meta` record opening a UGV log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMeta {
    pub seed: u64,
    pub k_ugv: CameraIntrinsics,
    pub k_uav: CameraIntrinsics,
    /// Ground truth `T_{W_A W_G}` when known.
    pub true_relative: Option<RelPose4>,
}

impl ScenarioMeta {
    pub fn of(s: &Scenario) -> Self {
        Self {
            seed: s.config.seed,
            k_ugv: s.k_ugv,
            k_uav: s.k_uav,
            true_relative: Some(s.true_relative),
        }
    }
}

struct Visible {
    id: usize,
    depth: f64,
    pixel: Vector2<f64>,
}

fn visible_landmarks(s: &Scenario, pose_g: &RigidTransform, k: &CameraIntrinsics) -> Vec<Visible> {
    let eye = *pose_g.translation();
    let inv = pose_g.inverse();
    let mut out: Vec<Visible> = s
        .landmarks
        .iter()
        .enumerate()
        .filter_map(|(id, l)| {
            let pc = inv.transform_point(&l.position);
            if pc.z < MIN_DEPTH || l.normal.dot(&(eye - l.position)) <= 0.0 {
                return None;
            }
            let pixel = k.project_unchecked(&pc);
            if !k.contains(&pixel) || occluded(&s.boxes, &eye, &l.position) {
                return None;
            }
            Some(Visible {
                id,
                depth: pc.norm(),
                pixel,
            })
        })
        .collect();
    out.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.id.cmp(&b.id)));
    out
}

fn region_vector(seed: u64, region: u32) -> Vec<f64> {
    let mut rng = stream(seed, TAG_REGION, region as u64);
    (0..GLOBAL_DESCRIPTOR_DIM).map(|_| rng.sample(StandardNormal)).collect()
}

/// Normalized count-weighted sum of per-region vectors; a view with no
/// landmarks gets a vector of its own.
fn global_descriptor(s: &Scenario, agent: Agent, index: usize, ids: &[usize]) -> Box<[f32; GLOBAL_DESCRIPTOR_DIM]> {
    let mut counts = BTreeMap::<u32, usize>::new();
    for id in ids {
        *counts.entry(s.landmarks[*id].region).or_default() += 1;
    }
    let mut acc = vec![0.0; GLOBAL_DESCRIPTOR_DIM];
    if counts.is_empty() {
        let mut rng = stream(s.config.seed, TAG_EMPTY_VIEW, (agent_tag(agent) << 32) | index as u64);
        acc.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
    }
    for (region, c) in counts {
        let r = region_vector(s.config.seed, region);
        acc.iter_mut().zip(r).for_each(|(a, v)| *a += c as f64 * v);
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut out = Box::new([0f32; GLOBAL_DESCRIPTOR_DIM]);
    out.iter_mut().zip(acc).for_each(|(o, v)| *o = (v / norm) as f32);
    out
}

fn reported_pose(s: &Scenario, agent: Agent, index: usize, truth: &RigidTransform) -> RigidTransform {
    let n = &s.config.noise;
    let (st, sr) = match agent {
        Agent::Aerial => (n.vio_translation_sigma, n.vio_rotation_sigma),
        Agent::Ground => (n.lio_translation_sigma, n.lio_rotation_sigma),
    };
    if st == 0.0 && sr == 0.0 {
        return *truth;
    }
    let mut rng = stream(s.config.seed, TAG_POSE + agent_tag(agent), index as u64);
    let mut draw = |sigma: f64| Vector3::from_fn(|_, _| sigma * rng.sample::<f64, _>(StandardNormal));
    let dw = draw(sr);
    let dt = draw(st);
    quantize_pose(&truth.retract(&dw, &dt))
}

/// Renders the packet `agent` would send at frame `index`.
pub fn render_frame(s: &Scenario, agent: Agent, index: usize) -> Result<RenderedFrame, SimError> {
    let true_pose = s.true_pose(agent, index)?;
    let pose_g = s.pose_in_ground_world(agent, index)?;
    let k = s.intrinsics(agent);
    let traj = match agent {
        Agent::Aerial => &s.uav_trajectory,
        Agent::Ground => &s.ugv_trajectory,
    };
    let noise = &s.config.noise;
    let mut rng = stream(s.config.seed, TAG_KEYPOINTS + agent_tag(agent), index as u64);

    let budget = s.config.keypoint_budget;
    let mut keypoints = Vec::with_capacity(budget);
    let mut descriptors = Vec::with_capacity(budget);
    let mut landmark_ids = Vec::with_capacity(budget);
    let mut exact_pixels = Vec::with_capacity(budget);
    for v in visible_landmarks(s, &pose_g, k) {
        if keypoints.len() == budget {
            break;
        }
        let mut px = v.pixel;
        if noise.pixel_sigma > 0.0 {
            px.x += noise.pixel_sigma * rng.sample::<f64, _>(StandardNormal);
            px.y += noise.pixel_sigma * rng.sample::<f64, _>(StandardNormal);
        }
        let mut d = s.landmarks[v.id].descriptor;
        if noise.descriptor_sigma > 0.0 {
            for x in d.iter_mut() {
                *x += (noise.descriptor_sigma * rng.sample::<f64, _>(StandardNormal)) as f32;
            }
            normalize_descriptor(&mut d);
        }
        let q = [px.x as f32, px.y as f32];
        if !k.contains(&Vector2::new(q[0] as f64, q[1] as f64)) {
            continue;
        }
        keypoints.push(q);
        descriptors.push(d);
        landmark_ids.push(v.id);
        exact_pixels.push(v.pixel);
    }

    let global = global_descriptor(s, agent, index, &landmark_ids);
    let reported = reported_pose(s, agent, index, &true_pose);
    let q = reported.wxyz();
    let t = reported.translation();
    let pose = [q[0], q[1], q[2], q[3], t.x, t.y, t.z].map(|v| v as f32);
    Ok(RenderedFrame {
        packet: FramePacket {
            frame_id: index as u64,
            timestamp_ns: traj[index].0,
            pose,
            keypoints,
            descriptors,
            global,
        },
        truth: FrameTruth {
            agent,
            index,
            true_pose,
            landmark_ids,
            exact_pixels,
        },
    })
}

/// Number of landmarks observed both by UGV frame `ground` and UAV frame `aerial`.
pub fn shared_landmarks(s: &Scenario, ground: usize, aerial: usize) -> Result<usize, SimError> {
    let g: BTreeSet<usize> = render_frame(s, Agent::Ground, ground)?.truth.landmark_ids.into_iter().collect();
    let a = render_frame(s, Agent::Aerial, aerial)?.truth.landmark_ids;
    Ok(a.iter().filter(|id| g.contains(id)).count())
}

/// Calls `f(point)` for every cloud sample within range of, and on a face
/// turned towards, one of `sensors`, reporting the first such sensor. Noise is drawn per face in
/// grid order so a sample is identical whichever call produces it.
fn for_each_cloud_point(s: &Scenario, sensors: &[Vector3<f64>], mut f: impl FnMut(Vector3<f64>, usize)) {
    let sp = s.config.cloud_spacing;
    let range = s.config.cloud_range;
    let sigma = s.config.noise.depth_sigma;
    for (bi, b) in s.boxes.iter().enumerate() {
        for (fi, face) in b.faces().iter().enumerate() {
            // Cheap reject: the face's bounding sphere is out of every range.
            let centre = face.origin + 0.5 * (face.u + face.v);
            let radius = 0.5 * (face.u + face.v).norm();
            if sensors.iter().all(|c| (c - centre).norm() > range + radius) {
                continue;
            }
            let nu = (face.u.norm() / sp).ceil().max(1.0) as usize;
            let nv = (face.v.norm() / sp).ceil().max(1.0) as usize;
            let mut rng = stream(s.config.seed, TAG_CLOUD, ((bi as u64) << 8) | fi as u64);
            for i in 0..nu {
                for j in 0..nv {
                    let p = face.origin
                        + face.u * ((i as f64 + 0.5) / nu as f64)
                        + face.v * ((j as f64 + 0.5) / nv as f64);
                    let p = if sigma > 0.0 {
                        p + face.normal * (sigma * rng.sample::<f64, _>(StandardNormal))
                    } else {
                        p
                    };
                    let seen = |c: &Vector3<f64>| (c - p).norm() <= range && face.normal.dot(&(c - p)) > 0.0;
                    if let Some(k) = sensors.iter().position(seen) {
                        f(p, k);
                    }
                }
            }
        }
    }
}

fn ugv_positions(s: &Scenario, upto: usize) -> Result<Vec<Vector3<f64>>, SimError> {
    if upto >= s.ugv_trajectory.len() {
        return Err(SimError::OutOfRange {
            index: upto,
            len: s.ugv_trajectory.len(),
        });
    }
    Ok(s.ugv_trajectory[..=upto].iter().map(|(_, p)| *p.translation()).collect())
}

/// Surface samples within `cloud_range` of the UGV at frame `index`, UGV world.
pub fn render_cloud(s: &Scenario, index: usize) -> Result<Vec<Vector3<f64>>, SimError> {
    let here = ugv_positions(s, index)?[index];
    let mut out = Vec::new();
    for_each_cloud_point(s, &[here], |p, _| out.push(p));
    Ok(out)
}

/// Samples first in range at frame `index`. The union over frames `0..=i`
/// equals the union of `render_cloud` over the same frames.
pub fn render_cloud_increment(s: &Scenario, index: usize) -> Result<Vec<Vector3<f64>>, SimError> {
    let sensors = ugv_positions(s, index)?;
    let mut out = Vec::new();
    for_each_cloud_point(s, &sensors, |p, k| {
        if k == index {
            out.push(p)
        }
    });
    Ok(out)
}

/// The two record streams a scenario produces: UAV packets, and the UGV log
/// (metadata, cloud increments and packets).
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioLogs {
    pub uav: Vec<LogRecord>,
    pub ugv: Vec<LogRecord>,
}

pub fn scenario_logs(s: &Scenario) -> Result<ScenarioLogs, SimError> {
    let meta = serde_json::to_vec(&ScenarioMeta::of(s)).expect("metadata serializes");
    let mut ugv = vec![LogRecord {
        source: Source::Meta,
        payload: meta,
    }];
    let mut uav = Vec::new();
    for i in 0..s.frame_count() {
        let mut cloud = Vec::new();
        crate::voxel_map::write_cloud(&mut cloud, &render_cloud_increment(s, i)?)
            .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        ugv.push(LogRecord {
            source: Source::Cloud,
            payload: cloud,
        });
        ugv.push(LogRecord {
            source: Source::Ground,
            payload: render_frame(s, Agent::Ground, i)?.packet.encode(),
        });
        uav.push(LogRecord {
            source: Source::Aerial,
            payload: render_frame(s, Agent::Aerial, i)?.packet.encode(),
        });
    }
    Ok(ScenarioLogs { uav, ugv })
}

/// Writes a record list as one `AGLP` stream.
pub fn write_log<W: Write>(records: &[LogRecord], w: W) -> Result<W, SimError> {
    let mut lw = LogWriter::new(w)?;
    for r in records {
        lw.write_record(r.source, &r.payload)?;
    }
    Ok(lw.finish()?)
}
