//! Sparse hashed-voxel point store and ray-marched pixel to point lookup.
//!
//! Only occupied voxels are stored. A second, coarser occupancy table lets the
//! ray march skip empty space without probing every fine voxel around each
//! sample; it never changes query results.

use std::collections::HashMap;
use std::io::{Read, Write};

use nalgebra::{Vector2, Vector3};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, GeometryError, RigidTransform};

pub const DEFAULT_VOXEL_SIZE: f64 = 0.1;
pub const DEFAULT_MAX_POINTS_PER_VOXEL: usize = 8;
const COARSE_FACTOR: i64 = 8;

#[derive(Debug, Error)]
pub enum VoxelError {
    #[error("non-finite point coordinate at index {index}")]
    NonFiniteInput { index: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("cloud file truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type VoxelKey = [i64; 3];

type Bucket = SmallVec<[Vector3<f64>; DEFAULT_MAX_POINTS_PER_VOXEL]>;

#[derive(Clone, Debug)]
pub struct VoxelMap {
    voxel_size: f64,
    max_points_per_voxel: usize,
    table: HashMap<VoxelKey, Bucket>,
    coarse: HashMap<VoxelKey, u32>,
    point_count: usize,
}

impl Default for VoxelMap {
    fn default() -> Self {
        Self::new(DEFAULT_VOXEL_SIZE)
    }
}

impl VoxelMap {
    pub fn new(voxel_size: f64) -> Self {
        Self::with_capacity_limit(voxel_size, DEFAULT_MAX_POINTS_PER_VOXEL)
    }

    pub fn with_capacity_limit(voxel_size: f64, max_points_per_voxel: usize) -> Self {
        assert!(voxel_size > 0.0, "voxel size must be positive");
        assert!(max_points_per_voxel > 0);
        Self {
            voxel_size,
            max_points_per_voxel,
            table: HashMap::new(),
            coarse: HashMap::new(),
            point_count: 0,
        }
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn max_points_per_voxel(&self) -> usize {
        self.max_points_per_voxel
    }

    pub fn len(&self) -> usize {
        self.point_count
    }

    pub fn is_empty(&self) -> bool {
        self.point_count == 0
    }

    pub fn voxel_count(&self) -> usize {
        self.table.len()
    }

    pub fn key_of(&self, p: &Vector3<f64>) -> VoxelKey {
        [
            (p.x / self.voxel_size).floor() as i64,
            (p.y / self.voxel_size).floor() as i64,
            (p.z / self.voxel_size).floor() as i64,
        ]
    }

    pub fn voxel(&self, key: &VoxelKey) -> &[Vector3<f64>] {
        self.table.get(key).map(|b| b.as_slice()).unwrap_or(&[])
    }

    pub fn iter_points(&self) -> impl Iterator<Item = (&VoxelKey, &Vector3<f64>)> {
        self.table
            .iter()
            .flat_map(|(k, b)| b.iter().map(move |p| (k, p)))
    }

    /// Inserts world-frame points. The whole cloud is validated first, so an
    /// error leaves the map untouched.
    pub fn insert_cloud(&mut self, points: &[Vector3<f64>]) -> Result<usize, VoxelError> {
        if let Some(index) = points
            .iter()
            .position(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()))
        {
            return Err(VoxelError::NonFiniteInput { index });
        }
        let mut inserted = 0;
        for p in points {
            let key = self.key_of(p);
            let bucket = self.table.entry(key).or_default();
            if bucket.len() >= self.max_points_per_voxel {
                continue;
            }
            bucket.push(*p);
            inserted += 1;
            *self.coarse.entry(coarse_key(&key)).or_insert(0) += 1;
        }
        self.point_count += inserted;
        Ok(inserted)
    }

    fn coarse_occupied(&self, lo: &VoxelKey, hi: &VoxelKey) -> bool {
        let clo = coarse_key(lo);
        let chi = coarse_key(hi);
        for x in clo[0]..=chi[0] {
            for y in clo[1]..=chi[1] {
                for z in clo[2]..=chi[2] {
                    if self.coarse.contains_key(&[x, y, z]) {
                        return true;
                    }
                }
            }
        }
        false
    }

    /// Closest stored point within `radius` of `query`, scanning every voxel
    /// the query ball touches. Ties keep the first point found in key order.
    pub fn nearest_neighbor(&self, query: &Vector3<f64>, radius: f64) -> Option<(Vector3<f64>, f64)> {
        if self.point_count == 0 || !(radius > 0.0) {
            return None;
        }
        let lo = self.key_of(&(query - Vector3::repeat(radius)));
        let hi = self.key_of(&(query + Vector3::repeat(radius)));
        if !self.coarse_occupied(&lo, &hi) {
            return None;
        }
        let r2 = radius * radius;
        let mut best: Option<(Vector3<f64>, f64)> = None;
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    let Some(bucket) = self.table.get(&[x, y, z]) else {
                        continue;
                    };
                    for p in bucket {
                        let d2 = (p - query).norm_squared();
                        if d2 <= r2 && best.map_or(true, |(_, b)| d2 < b) {
                            best = Some((*p, d2));
                        }
                    }
                }
            }
        }
        best.map(|(p, d2)| (p, d2.sqrt()))
    }

    pub fn pixel_to_point(
        &self,
        k: &CameraIntrinsics,
        cam_pose: &RigidTransform,
        pixel: &Vector2<f64>,
        cfg: &RayCastConfig,
    ) -> Result<Option<Vector3<f64>>, VoxelError> {
        Ok(self
            .pixel_to_point_detailed(k, cam_pose, pixel, cfg)?
            .map(|hit| hit.point_cam))
    }

    /// Marches the pixel's ray from `depth_min` outwards and returns the first
    /// neighbour whose reprojection lands within `reproj_threshold`, replaced
    /// by its perpendicular foot on the ray (camera frame).
    pub fn pixel_to_point_detailed(
        &self,
        k: &CameraIntrinsics,
        cam_pose: &RigidTransform,
        pixel: &Vector2<f64>,
        cfg: &RayCastConfig,
    ) -> Result<Option<RayHit>, VoxelError> {
        let ray = k.backproject_ray(pixel)?;
        if self.is_empty() {
            return Ok(None);
        }
        let world_to_cam = cam_pose.inverse();
        let steps = cfg.step_count();
        for i in 0..=steps {
            let depth = cfg.depth_min + i as f64 * cfg.step;
            if depth > cfg.depth_max + 1e-12 {
                break;
            }
            let sample_world = cam_pose.transform_point(&(ray * depth));
            let Some((nb_world, _)) = self.nearest_neighbor(&sample_world, cfg.neighbor_radius)
            else {
                continue;
            };
            let nb_cam = world_to_cam.transform_point(&nb_world);
            let Ok(reproj) = k.project(&nb_cam) else {
                continue;
            };
            let err = (reproj - pixel).norm();
            if err <= cfg.reproj_threshold {
                let foot = ray * nb_cam.dot(&ray);
                return Ok(Some(RayHit {
                    point_cam: foot,
                    neighbor_world: nb_world,
                    reproj_error: err,
                    march_depth: depth,
                }));
            }
        }
        Ok(None)
    }
}

fn coarse_key(k: &VoxelKey) -> VoxelKey {
    [
        k[0].div_euclid(COARSE_FACTOR),
        k[1].div_euclid(COARSE_FACTOR),
        k[2].div_euclid(COARSE_FACTOR),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayHit {
    /// Perpendicular foot of the accepted neighbour on the ray, camera frame.
    pub point_cam: Vector3<f64>,
    pub neighbor_world: Vector3<f64>,
    pub reproj_error: f64,
    /// Ray distance of the march sample that found the neighbour.
    pub march_depth: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RayCastConfig {
    pub step: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    pub reproj_threshold: f64,
    pub neighbor_radius: f64,
}

impl Default for RayCastConfig {
    fn default() -> Self {
        Self {
            step: 0.05,
            depth_min: 0.3,
            depth_max: 30.0,
            reproj_threshold: 2.0,
            neighbor_radius: 0.15,
        }
    }
}

impl RayCastConfig {
    pub fn validate(&self) -> Result<(), VoxelError> {
        if !(self.step > 0.0 && self.step < self.depth_max - self.depth_min) {
            return Err(VoxelError::InvalidConfig(format!(
                "step {} must lie in (0, depth_max - depth_min)",
                self.step
            )));
        }
        if !(self.depth_min > 0.0) {
            return Err(VoxelError::InvalidConfig("depth_min must be positive".into()));
        }
        if !(self.reproj_threshold > 0.0) || !(self.neighbor_radius > 0.0) {
            return Err(VoxelError::InvalidConfig(
                "reproj_threshold and neighbor_radius must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn step_count(&self) -> usize {
        ((self.depth_max - self.depth_min) / self.step + 1e-9).floor() as usize
    }
}

/// Voxel map shared between one ingestion thread and concurrent ray-cast
/// readers. Each call holds the lock for its whole duration, so readers
/// always see the table between two complete `insert_cloud` calls.
#[derive(Debug, Default)]
pub struct SharedVoxelMap {
    inner: RwLock<VoxelMap>,
}

impl SharedVoxelMap {
    pub fn new(map: VoxelMap) -> Self {
        Self {
            inner: RwLock::new(map),
        }
    }

    pub fn insert_cloud(&self, points: &[Vector3<f64>]) -> Result<usize, VoxelError> {
        self.inner.write().insert_cloud(points)
    }

    pub fn nearest_neighbor(&self, query: &Vector3<f64>, radius: f64) -> Option<(Vector3<f64>, f64)> {
        self.inner.read().nearest_neighbor(query, radius)
    }

    pub fn pixel_to_point(
        &self,
        k: &CameraIntrinsics,
        cam_pose: &RigidTransform,
        pixel: &Vector2<f64>,
        cfg: &RayCastConfig,
    ) -> Result<Option<Vector3<f64>>, VoxelError> {
        self.inner.read().pixel_to_point(k, cam_pose, pixel, cfg)
    }

    pub fn len(&self) -> usize {
        self.inner.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.read().is_empty()
    }

    pub fn snapshot(&self) -> VoxelMap {
        self.inner.read().clone()
    }

    pub fn into_inner(self) -> VoxelMap {
        self.inner.into_inner()
    }
}

/// Writes a flat cloud: `u32` count followed by little-endian `f32` triples.
pub fn write_cloud<W: Write>(mut w: W, points: &[Vector3<f64>]) -> Result<(), VoxelError> {
    let mut buf = Vec::with_capacity(4 + 12 * points.len());
    buf.extend_from_slice(&(points.len() as u32).to_le_bytes());
    for p in points {
        for c in [p.x, p.y, p.z] {
            buf.extend_from_slice(&(c as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_cloud<R: Read>(mut r: R) -> Result<Vec<Vector3<f64>>, VoxelError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_cloud(&bytes)
}

pub fn decode_cloud(bytes: &[u8]) -> Result<Vec<Vector3<f64>>, VoxelError> {
    if bytes.len() < 4 {
        return Err(VoxelError::Truncated {
            expected: 4,
            found: bytes.len(),
        });
    }
    let n = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let expected = 4 + 12 * n;
    if bytes.len() < expected {
        return Err(VoxelError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let f = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64;
    Ok((0..n)
        .map(|i| {
            let o = 4 + 12 * i;
            Vector3::new(f(o), f(o + 4), f(o + 8))
        })
        .collect())
}
