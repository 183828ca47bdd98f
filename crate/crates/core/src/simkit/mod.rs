//! Synthetic air-ground scenarios with full ground truth.
//!
//! The world is a field of axis-aligned boxes (building facades and smaller
//! blocks) in the UGV world frame. Landmarks sit on box faces, each with a
//! 64-D identity descriptor and a region tag (the box it belongs to). The UGV
//! camera looks sideways from a ground path; the UAV camera looks at the same
//! field obliquely from altitude. UAV poses are reported in the UAV world
//! frame, related to the UGV world by the scenario's true `T_{W_A W_G}`.

mod render;
mod scene;

use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use render::{
    render_cloud, render_cloud_increment, render_frame, scenario_logs, shared_landmarks, write_log, FrameTruth,
    RenderedFrame, ScenarioLogs, ScenarioMeta,
};
pub use scene::SceneBox;

use crate::association::{normalize_descriptor, LocalDescriptor, LOCAL_DESCRIPTOR_DIM};
use crate::geometry::{CameraIntrinsics, RelPose4, RigidTransform};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
    #[error("frame index {index} outside trajectory of {len} frames")]
    OutOfRange { index: usize, len: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Protocol(#[from] crate::protocol::ProtocolError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Both agents see the same block field from the first frame.
    Covisible,
    /// The UAV starts over a separate block field and joins the UGV midway.
    DisjointStart,
    /// A single wall facing the UGV camera.
    Plane,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    /// Keypoint pixel noise, per axis.
    pub pixel_sigma: f64,
    /// Per-component descriptor noise before re-normalization.
    pub descriptor_sigma: f64,
    /// Radial noise on cloud points, meters.
    pub depth_sigma: f64,
    /// Reported UAV pose noise, meters and radians per axis.
    pub vio_translation_sigma: f64,
    pub vio_rotation_sigma: f64,
    /// Reported UGV pose noise, meters and radians per axis.
    pub lio_translation_sigma: f64,
    pub lio_rotation_sigma: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::zero()
    }
}

impl NoiseModel {
    pub fn zero() -> Self {
        Self {
            pixel_sigma: 0.0,
            descriptor_sigma: 0.0,
            depth_sigma: 0.0,
            vio_translation_sigma: 0.0,
            vio_rotation_sigma: 0.0,
            lio_translation_sigma: 0.0,
            lio_rotation_sigma: 0.0,
        }
    }

    /// Pixel 0.5 px, depth 0.02 m, poses 0.01 m / 0.5 deg, descriptors 0.05.
    pub fn benchmark() -> Self {
        Self {
            pixel_sigma: 0.5,
            descriptor_sigma: 0.05,
            depth_sigma: 0.02,
            vio_translation_sigma: 0.01,
            vio_rotation_sigma: 0.5f64.to_radians(),
            lio_translation_sigma: 0.01,
            lio_rotation_sigma: 0.5f64.to_radians(),
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        let v = [
            self.pixel_sigma,
            self.descriptor_sigma,
            self.depth_sigma,
            self.vio_translation_sigma,
            self.vio_rotation_sigma,
            self.lio_translation_sigma,
            self.lio_rotation_sigma,
        ];
        if v.iter().all(|s| *s >= 0.0 && s.is_finite()) {
            Ok(())
        } else {
            Err(SimError::InvalidConfig("noise sigmas must be finite and >= 0".into()))
        }
    }
}

/// Scenario description, loadable from a TOML key-value file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub preset: Preset,
    pub seed: u64,
    /// Frames rendered per agent, one per second.
    pub frames: usize,
    pub keypoint_budget: usize,
    /// Landmarks per square meter of box surface.
    pub landmark_density: f64,
    /// Grid spacing of cloud samples on box faces, meters.
    pub cloud_spacing: f64,
    /// Cloud samples are emitted within this distance of the UGV, meters.
    pub cloud_range: f64,
    pub ugv_speed: f64,
    pub ugv_camera_height: f64,
    pub uav_altitude: f64,
    pub uav_pitch_deg: f64,
    pub image_width: u32,
    pub image_height: u32,
    pub focal_length: f64,
    /// `[x, y, z, yaw_deg]` of `T_{W_A W_G}`; drawn from the seed when absent.
    pub relative: Option<[f64; 4]>,
    pub noise: NoiseModel,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Covisible,
            seed: 0,
            frames: 8,
            keypoint_budget: 256,
            landmark_density: 1.0,
            cloud_spacing: 0.05,
            cloud_range: 20.0,
            ugv_speed: 1.0,
            ugv_camera_height: 0.8,
            uav_altitude: 6.0,
            uav_pitch_deg: 30.0,
            image_width: 640,
            image_height: 480,
            focal_length: 450.0,
            relative: None,
            noise: NoiseModel::zero(),
        }
    }
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        toml::from_str(text).map_err(|e| SimError::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics, SimError> {
        CameraIntrinsics::new(
            self.focal_length,
            self.focal_length,
            self.image_width as f64 / 2.0,
            self.image_height as f64 / 2.0,
            self.image_width,
            self.image_height,
        )
        .map_err(|e| SimError::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if self.frames == 0 {
            return bad("frames must be > 0");
        }
        if !(4..=4096).contains(&self.keypoint_budget) {
            return bad("keypoint_budget must lie in [4, 4096]");
        }
        let positive = [
            self.landmark_density,
            self.cloud_spacing,
            self.cloud_range,
            self.ugv_camera_height,
            self.uav_altitude,
            self.focal_length,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("densities, spacings, heights and focal length must be positive");
        }
        if !(self.ugv_speed >= 0.0) || !(0.0..=80.0).contains(&self.uav_pitch_deg) {
            return bad("ugv_speed must be >= 0 and uav_pitch_deg within [0, 80]");
        }
        if self.relative.is_some_and(|r| r.iter().any(|v| !v.is_finite())) {
            return bad("relative pose must be finite");
        }
        self.noise.validate()?;
        self.intrinsics()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimLandmark {
    /// UGV world frame.
    pub position: Vector3<f64>,
    /// Outward face normal.
    pub normal: Vector3<f64>,
    #[serde(with = "descriptor_serde")]
    pub descriptor: LocalDescriptor,
    /// Index of the box the landmark lies on.
    pub region: u32,
}

mod descriptor_serde {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    use crate::association::LocalDescriptor;

    pub fn serialize<S: Serializer>(d: &LocalDescriptor, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(d.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<LocalDescriptor, D::Error> {
        let v = Vec::<f32>::deserialize(d)?;
        let n = v.len();
        v.try_into().map_err(|_| D::Error::invalid_length(n, &"64 components"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Agent {
    Aerial,
    Ground,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub config: SimConfig,
    pub boxes: Vec<SceneBox>,
    pub landmarks: Vec<SimLandmark>,
    /// True UGV camera poses `T_{W_G C_G}`, one per frame.
    pub ugv_trajectory: Vec<(u64, RigidTransform)>,
    /// True UAV camera poses `T_{W_A C_A}` in the UAV world, one per frame.
    pub uav_trajectory: Vec<(u64, RigidTransform)>,
    pub true_relative: RelPose4,
    pub k_ugv: CameraIntrinsics,
    pub k_uav: CameraIntrinsics,
}

pub const NANOS_PER_SECOND: u64 = 1_000_000_000;

/// SplitMix64 finalizer, used to derive independent RNG streams.
pub(crate) fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed ^ tag.rotate_left(40)) ^ index))
}

/// Rounds a pose to what survives the packet's f32 fields.
pub fn quantize_pose(t: &RigidTransform) -> RigidTransform {
    let q = t.wxyz().map(|v| v as f32 as f64);
    let p = t.translation().map(|v| v as f32 as f64);
    RigidTransform::from_wxyz_translation(q, [p.x, p.y, p.z]).expect("unit quaternion survives rounding")
}

pub fn random_descriptor(rng: &mut impl Rng) -> LocalDescriptor {
    let normal = rand_distr::StandardNormal;
    let mut d = [0f32; LOCAL_DESCRIPTOR_DIM];
    for x in d.iter_mut() {
        *x = rng.sample::<f32, _>(normal);
    }
    normalize_descriptor(&mut d);
    d
}

/// Side-looking camera: optical axis along world `+y` rotated by `heading`
/// about `+z`, tilted down by `pitch`.
fn side_camera(heading: f64, pitch: f64) -> UnitQuaternion<f64> {
    let (s, c) = pitch.sin_cos();
    let z = Vector3::new(0.0, c, -s);
    let x = Vector3::x();
    let y = z.cross(&x);
    let base = nalgebra::Rotation3::from_basis_unchecked(&[x, y, z]);
    UnitQuaternion::from_axis_angle(&Vector3::z_axis(), heading) * UnitQuaternion::from_rotation_matrix(&base)
}

fn lerp_waypoints(points: &[(f64, Vector3<f64>)], t: f64) -> Vector3<f64> {
    if t <= points[0].0 {
        return points[0].1;
    }
    for w in points.windows(2) {
        let ((t0, p0), (t1, p1)) = (w[0], w[1]);
        if t <= t1 {
            let a = (t - t0) / (t1 - t0);
            return p0 + (p1 - p0) * a;
        }
    }
    points.last().unwrap().1
}

/// Builds a scenario deterministically from `config.seed`.
pub fn generate(config: &SimConfig) -> Result<Scenario, SimError> {
    config.validate()?;
    let k = config.intrinsics()?;
    let mut rng = stream(config.seed, 1, 0);
    let true_relative = match config.relative {
        Some([x, y, z, yaw]) => RelPose4::new(Vector3::new(x, y, z), yaw.to_radians()),
        None => RelPose4::new(
            Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0)),
            rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        ),
    };
    let n = config.frames;
    let last_t = (n - 1) as f64;
    let path_len = config.ugv_speed * last_t;

    let mut boxes = Vec::new();
    match config.preset {
        Preset::Plane => boxes.push(SceneBox::new(
            Vector3::new(-30.0, 5.0, -4.0),
            Vector3::new(path_len + 30.0, 5.3, 8.0),
        )),
        Preset::Covisible => scene::block_field(&mut rng, -10.0, path_len + 10.0, &mut boxes),
        Preset::DisjointStart => {
            scene::block_field(&mut rng, -10.0, path_len + 10.0, &mut boxes);
            scene::block_field(&mut rng, -95.0, -65.0, &mut boxes);
        }
    }
    let landmarks = scene::place_landmarks(&mut rng, &boxes, config.landmark_density);

    let ugv_rot = side_camera(0.0, 0.0);
    let ugv_trajectory = (0..n)
        .map(|i| {
            let p = Vector3::new(config.ugv_speed * i as f64, 0.0, config.ugv_camera_height);
            (i as u64 * NANOS_PER_SECOND, quantize_pose(&RigidTransform::new(ugv_rot, p)))
        })
        .collect();

    let ugv_x = |t: f64| config.ugv_speed * t;
    let uav_waypoints: Vec<(f64, Vector3<f64>)> = match config.preset {
        Preset::DisjointStart => {
            let join = (last_t / 2.0).floor().max(1.0);
            vec![
                (0.0, Vector3::new(-80.0, -3.0, config.uav_altitude)),
                (join, Vector3::new(ugv_x(join), -3.0, config.uav_altitude)),
                (last_t.max(join + 1.0), Vector3::new(ugv_x(last_t.max(join + 1.0)), -3.0, config.uav_altitude)),
            ]
        }
        _ => vec![
            (0.0, Vector3::new(-1.0, -3.0, config.uav_altitude)),
            (last_t.max(1.0), Vector3::new(ugv_x(last_t.max(1.0)) + 1.0, -3.0, config.uav_altitude)),
        ],
    };
    let pitch = config.uav_pitch_deg.to_radians();
    let wa_wg = true_relative.to_rigid();
    let uav_trajectory = (0..n)
        .map(|i| {
            let t = i as f64;
            let heading = 10f64.to_radians() * (0.7 * t).sin();
            let in_ground_world = RigidTransform::new(side_camera(heading, pitch), lerp_waypoints(&uav_waypoints, t));
            (i as u64 * NANOS_PER_SECOND, quantize_pose(&(wa_wg * in_ground_world)))
        })
        .collect();

    Ok(Scenario {
        config: config.clone(),
        boxes,
        landmarks,
        ugv_trajectory,
        uav_trajectory,
        true_relative,
        k_ugv: k,
        k_uav: k,
    })
}

impl Scenario {
    pub fn frame_count(&self) -> usize {
        self.config.frames
    }

    /// True camera pose of `agent` at frame `index`, in that agent's world.
    pub fn true_pose(&self, agent: Agent, index: usize) -> Result<RigidTransform, SimError> {
        let traj = match agent {
            Agent::Aerial => &self.uav_trajectory,
            Agent::Ground => &self.ugv_trajectory,
        };
        traj.get(index)
            .map(|(_, p)| *p)
            .ok_or(SimError::OutOfRange {
                index,
                len: traj.len(),
            })
    }

    /// True camera pose of `agent` expressed in the UGV world frame.
    pub fn pose_in_ground_world(&self, agent: Agent, index: usize) -> Result<RigidTransform, SimError> {
        let p = self.true_pose(agent, index)?;
        Ok(match agent {
            Agent::Ground => p,
            Agent::Aerial => self.true_relative.to_rigid().inverse() * p,
        })
    }

    pub fn intrinsics(&self, agent: Agent) -> &CameraIntrinsics {
        match agent {
            Agent::Aerial => &self.k_uav,
            Agent::Ground => &self.k_ugv,
        }
    }
}
