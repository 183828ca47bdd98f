//! Rigid-body algebra, the gravity-aligned 4-DoF relative pose, the pinhole
//! camera and the Huber kernel shared by every stage of the pipeline.
//!
//! Conventions: world frames are z-up and right-handed, yaw is measured
//! counterclockwise from +x, camera frames are x-right / y-down / z-forward.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point has non-positive depth z = {z}")]
    NonPositiveDepth { z: f64 },
    #[error("pixel ({u}, {v}) lies outside the image")]
    OutOfImage { u: f64, v: f64 },
    #[error("yaw undefined: rotated x-axis is parallel to gravity")]
    GimbalDegenerate,
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid robust norm threshold {0}")]
    InvalidThreshold(f64),
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r + 2.0 * PI
    } else {
        r
    }
}

/// Absolute wrapped difference between two angles, in `[0, pi]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation about +z by `yaw` radians.
pub fn rot_z(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn canonical(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    // renormalize in f64 and pin the double cover to w >= 0
    let mut raw = *q.quaternion();
    if raw.w < 0.0 {
        raw = -raw;
    }
    UnitQuaternion::new_normalize(raw)
}

/// SE(3) pose stored as a unit quaternion (w >= 0) plus a translation.
///
/// Applied to a point as `R p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: canonical(rotation),
            translation,
        }
    }

    /// Builds a transform from raw `(w, x, y, z)` quaternion components, which
    /// are normalized. Returns `None` for a zero or non-finite quaternion.
    pub fn from_wxyz_translation(q: [f64; 4], t: [f64; 3]) -> Option<Self> {
        let raw = Quaternion::new(q[0], q[1], q[2], q[3]);
        let n = raw.norm();
        if !n.is_finite() || n < 1e-12 || t.iter().any(|c| !c.is_finite()) {
            return None;
        }
        Some(Self::new(
            UnitQuaternion::new_normalize(raw),
            Vector3::new(t[0], t[1], t[2]),
        ))
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    pub fn from_rotation_matrix(r: &Matrix3<f64>, t: Vector3<f64>) -> Self {
        let rot = nalgebra::Rotation3::from_matrix(r);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), t)
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Quaternion components in `(w, x, y, z)` order.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    /// Result applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> RigidTransform {
        let inv = self.rotation.inverse();
        RigidTransform::new(inv, -(inv * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Rotation angle of `self^-1 * other` in radians.
    pub fn rotation_angle_to(&self, other: &RigidTransform) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    /// Right-perturbation retraction: `R <- R Exp(dw)`, `t <- t + dt`.
    pub fn retract(&self, dw: &Vector3<f64>, dt: &Vector3<f64>) -> RigidTransform {
        RigidTransform::new(
            self.rotation * UnitQuaternion::from_scaled_axis(*dw),
            self.translation + dt,
        )
    }

    /// Inverse of [`retract`](Self::retract): returns `(Log(R0^T R), t - t0)`.
    pub fn local_difference(&self, base: &RigidTransform) -> (Vector3<f64>, Vector3<f64>) {
        let dr = (base.rotation.inverse() * self.rotation).scaled_axis();
        (dr, self.translation - base.translation)
    }

    /// Yaw: heading of the rotated x-axis projected onto the xy-plane.
    pub fn yaw(&self) -> Result<f64, GeometryError> {
        let x = self.rotation * Vector3::x();
        if x.x.hypot(x.y) < 1e-9 {
            return Err(GeometryError::GimbalDegenerate);
        }
        Ok(wrap_angle(x.y.atan2(x.x)))
    }

    /// Roll and pitch magnitude: the angle between the rotated z-axis and +z.
    pub fn tilt(&self) -> f64 {
        let z = self.rotation * Vector3::z();
        z.z.clamp(-1.0, 1.0).acos()
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

impl Mul<&RigidTransform> for &RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: &RigidTransform) -> RigidTransform {
        self.compose(rhs)
    }
}

impl fmt::Display for RigidTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [w, x, y, z] = self.wxyz();
        let t = self.translation;
        write!(
            f,
            "q=({w:.6}, {x:.6}, {y:.6}, {z:.6}) t=({:.6}, {:.6}, {:.6})",
            t.x, t.y, t.z
        )
    }
}

/// Free-function form of [`RigidTransform::compose`].
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    t.inverse()
}

pub fn transform_point(t: &RigidTransform, p: &Vector3<f64>) -> Vector3<f64> {
    t.transform_point(p)
}

pub fn yaw_of(t: &RigidTransform) -> Result<f64, GeometryError> {
    t.yaw()
}

/// Gravity-aligned relative pose: translation plus yaw about +z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelPose4 {
    pub translation: Vector3<f64>,
    yaw: f64,
}

impl Default for RelPose4 {
    fn default() -> Self {
        Self::identity()
    }
}

impl RelPose4 {
    pub fn new(translation: Vector3<f64>, yaw: f64) -> Self {
        Self {
            translation,
            yaw: wrap_angle(yaw),
        }
    }

    pub fn identity() -> Self {
        Self::new(Vector3::zeros(), 0.0)
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn set_yaw(&mut self, yaw: f64) {
        self.yaw = wrap_angle(yaw);
    }

    pub fn to_rigid(&self) -> RigidTransform {
        RigidTransform::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), self.yaw),
            self.translation,
        )
    }

    /// Drops roll and pitch, keeping the translation and [`RigidTransform::yaw`].
    pub fn from_rigid(t: &RigidTransform) -> Result<Self, GeometryError> {
        Ok(Self::new(*t.translation(), t.yaw()?))
    }

    pub fn inverse(&self) -> Self {
        let r = rot_z(-self.yaw);
        Self::new(-(r * self.translation), -self.yaw)
    }

    pub fn compose(&self, other: &RelPose4) -> Self {
        Self::new(
            rot_z(self.yaw) * other.translation + self.translation,
            self.yaw + other.yaw,
        )
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        rot_z(self.yaw) * p + self.translation
    }

    pub fn translation_error(&self, truth: &RelPose4) -> f64 {
        (self.translation - truth.translation).norm()
    }

    pub fn yaw_error(&self, truth: &RelPose4) -> f64 {
        angle_diff(self.yaw, truth.yaw)
    }
}

impl fmt::Display for RelPose4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.translation;
        write!(
            f,
            "x={:.6} y={:.6} z={:.6} yaw={:.6}deg",
            t.x,
            t.y,
            t.z,
            self.yaw.to_degrees()
        )
    }
}

/// Pinhole intrinsics. Image bounds are `[0, width) x [0, height)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cx={} outside [0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cy={} outside [0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }

    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if p.z <= 1e-9 {
            return Err(GeometryError::NonPositiveDepth { z: p.z });
        }
        Ok(self.project_unchecked(p))
    }

    #[inline]
    pub fn project_unchecked(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }

    /// Derivative of the projection with respect to the camera-frame point.
    pub fn project_jacobian(&self, p: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        let iz2 = iz * iz;
        nalgebra::Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz2,
        )
    }

    /// Bearing `((u - cx)/fx, (v - cy)/fy, 1)` without bounds checks.
    pub fn normalized_bearing(&self, px: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy, 1.0)
    }

    pub fn backproject_ray(&self, px: &Vector2<f64>) -> Result<Vector3<f64>, GeometryError> {
        if !self.contains(px) {
            return Err(GeometryError::OutOfImage { u: px.x, v: px.y });
        }
        Ok(self.normalized_bearing(px).normalize())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RobustKind {
    Huber,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustNorm {
    pub kind: RobustKind,
    pub threshold: f64,
}

impl Default for RobustNorm {
    fn default() -> Self {
        Self::huber(2.0)
    }
}

impl RobustNorm {
    pub fn huber(threshold: f64) -> Self {
        Self {
            kind: RobustKind::Huber,
            threshold,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.threshold > 0.0 && self.threshold.is_finite() {
            Ok(())
        } else {
            Err(GeometryError::InvalidThreshold(self.threshold))
        }
    }

    /// Cost and IRLS weight for a residual of Euclidean length `s`.
    pub fn eval_norm(&self, s: f64) -> (f64, f64) {
        let d = self.threshold;
        match self.kind {
            RobustKind::Huber => {
                if s <= d {
                    (0.5 * s * s, 1.0)
                } else {
                    (d * (s - 0.5 * d), d / s)
                }
            }
        }
    }

    pub fn eval(&self, r: &Vector2<f64>) -> (f64, f64) {
        self.eval_norm(r.norm())
    }
}

pub fn robust_eval(n: &RobustNorm, r: &Vector2<f64>) -> (f64, f64) {
    n.eval(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let angle = rng.random_range(-3.0..3.0);
        let t = Vector3::new(
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
        );
        RigidTransform::new(
            UnitQuaternion::from_scaled_axis(axis.normalize() * angle),
            t,
        )
    }

    // Homogeneous matrix built entry by entry from the quaternion formula,
    // independent of nalgebra's rotation conversion.
    fn oracle_matrix(t: &RigidTransform) -> Matrix4<f64> {
        let [w, x, y, z] = t.wxyz();
        let tr = t.translation();
        Matrix4::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            tr.x,
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            tr.y,
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
            tr.z,
            0.0,
            0.0,
            0.0,
            1.0,
        )
    }

    fn oracle_matmul(a: &Matrix4<f64>, b: &Matrix4<f64>) -> Matrix4<f64> {
        let mut c = Matrix4::zeros();
        for i in 0..4 {
            for j in 0..4 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a[(i, k)] * b[(k, j)];
                }
                c[(i, j)] = s;
            }
        }
        c
    }

    fn is_identity(t: &RigidTransform, tol: f64) -> bool {
        t.rotation().angle() <= tol && t.translation().norm() <= tol
    }

    #[test]
    fn compose_identity_and_inverse_laws() {
        let i = RigidTransform::identity();
        assert!(is_identity(&compose(&i, &i), 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let t = random_transform(&mut rng);
            assert!(is_identity(&compose(&t, &invert(&t)), 1e-9));
            assert!(is_identity(&compose(&invert(&t), &t), 1e-9));
            assert!((t.rotation().quaternion().norm() - 1.0).abs() < 1e-9);
            assert!(t.wxyz()[0] >= 0.0);
        }
    }

    #[test]
    fn compose_matches_matrix_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let a = random_transform(&mut rng);
            let b = random_transform(&mut rng);
            let expected = oracle_matmul(&oracle_matrix(&a), &oracle_matrix(&b));
            let got = oracle_matrix(&compose(&a, &b));
            for (g, e) in got.iter().zip(expected.iter()) {
                assert!((g - e).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn invert_cases() {
        assert!(is_identity(&invert(&RigidTransform::identity()), 0.0));
        let t = RigidTransform::from_translation(Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(*invert(&t).translation(), Vector3::new(-1.0, -2.0, -3.0));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let t = random_transform(&mut rng);
            let expected = oracle_matrix(&t).try_inverse().unwrap();
            let got = oracle_matrix(&invert(&t));
            for (g, e) in got.iter().zip(expected.iter()) {
                assert!((g - e).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn transform_point_cases() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(transform_point(&RigidTransform::identity(), &p), p);
        let quarter = RelPose4::new(Vector3::zeros(), PI / 2.0).to_rigid();
        let q = transform_point(&quarter, &Vector3::x());
        assert!((q - Vector3::y()).norm() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let t = random_transform(&mut rng);
            let p = Vector3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            );
            let q = Vector3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            );
            let h = oracle_matrix(&t) * p.push(1.0);
            assert!((transform_point(&t, &p) - h.xyz()).norm() < 1e-9);
            let d0 = (p - q).norm();
            let d1 = (t.transform_point(&p) - t.transform_point(&q)).norm();
            assert!((d0 - d1).abs() < 1e-9);
        }
    }

    #[test]
    fn group_associativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let a = random_transform(&mut rng);
            let b = random_transform(&mut rng);
            let c = random_transform(&mut rng);
            let l = (a * b) * c;
            let r = a * (b * c);
            assert!(l.rotation_angle_to(&r) < 1e-9);
            assert!((l.translation() - r.translation()).norm() < 1e-9);
        }
    }

    #[test]
    fn yaw_only_closure() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let a = RelPose4::new(Vector3::new(1.0, 2.0, 0.5), rng.random_range(-PI..PI));
            let b = RelPose4::new(Vector3::new(-3.0, 0.1, 2.0), rng.random_range(-PI..PI));
            let c = a.to_rigid() * b.to_rigid();
            assert!(c.tilt() < 1e-9);
            let c4 = a.compose(&b).to_rigid();
            assert!(c4.rotation_angle_to(&c) < 1e-12);
            assert!((c4.translation() - c.translation()).norm() < 1e-12);
        }
    }

    #[test]
    fn project_cases() {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        assert_eq!(
            k.project(&Vector3::new(0.0, 0.0, 2.0)).unwrap(),
            Vector2::new(320.0, 240.0)
        );
        assert_eq!(
            k.project(&Vector3::new(1.0, 0.0, 2.0)).unwrap(),
            Vector2::new(570.0, 240.0)
        );
        assert!(matches!(
            k.project(&Vector3::new(1.0, 0.0, 0.0)),
            Err(GeometryError::NonPositiveDepth { .. })
        ));
        assert!(k.project(&Vector3::new(1.0, 0.0, -1.0)).is_err());
    }

    #[test]
    fn backproject_cases() {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        assert!((k.backproject_ray(&Vector2::new(320.0, 240.0)).unwrap() - Vector3::z()).norm() < 1e-15);
        let r = k.backproject_ray(&Vector2::new(570.0, 240.0)).unwrap();
        assert!((r - Vector3::new(1.0, 0.0, 2.0).normalize()).norm() < 1e-12);
        assert!(matches!(
            k.backproject_ray(&Vector2::new(640.0, 10.0)),
            Err(GeometryError::OutOfImage { .. })
        ));
        assert!(k.backproject_ray(&Vector2::new(-0.5, 10.0)).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let px = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let ray = k.backproject_ray(&px).unwrap();
            assert!(ray.z > 0.0);
            assert!((ray.norm() - 1.0).abs() < 1e-12);
            let depth = rng.random_range(0.1..50.0);
            assert!((k.project(&(ray * depth)).unwrap() - px).norm() < 1e-9);
        }
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 0.0, 3.5, 4, 4).is_ok());
    }

    #[test]
    fn projection_invariant_under_matrix_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let k = CameraIntrinsics::new(400.0, 410.0, 320.0, 240.0, 640, 480).unwrap();
        let mut checked = 0;
        while checked < 100 {
            let t = random_transform(&mut rng);
            let p = t.transform_point(&Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(0.5..10.0),
            ));
            let via_pose = k.project(&invert(&t).transform_point(&p)).unwrap();
            let h = oracle_matrix(&t).try_inverse().unwrap() * p.push(1.0);
            let via_matrix = k.project(&h.xyz()).unwrap();
            assert!((via_pose - via_matrix).norm() < 1e-9);
            checked += 1;
        }
    }

    #[test]
    fn yaw_cases() {
        let t = RelPose4::new(Vector3::zeros(), PI / 6.0).to_rigid();
        assert!((yaw_of(&t).unwrap() - PI / 6.0).abs() < 1e-12);
        assert_eq!(yaw_of(&RigidTransform::identity()).unwrap(), 0.0);
        let pitch_up = RigidTransform::new(
            UnitQuaternion::from_axis_angle(&Vector3::y_axis(), PI / 2.0),
            Vector3::zeros(),
        );
        assert_eq!(yaw_of(&pitch_up), Err(GeometryError::GimbalDegenerate));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let q = wrap_angle(rng.random_range(-PI..PI));
            let got = yaw_of(&RelPose4::new(Vector3::zeros(), q).to_rigid()).unwrap();
            assert!(angle_diff(got, q) < 1e-12);
        }
    }

    #[test]
    fn relpose_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..200 {
            let p = RelPose4::new(
                Vector3::new(
                    rng.random_range(-50.0..50.0),
                    rng.random_range(-50.0..50.0),
                    rng.random_range(-5.0..5.0),
                ),
                rng.random_range(-4.0..4.0),
            );
            let r = p.to_rigid();
            assert!(r.tilt() < 1e-12);
            let back = RelPose4::from_rigid(&r).unwrap();
            assert!((back.translation - p.translation).norm() < 1e-12);
            assert!(angle_diff(back.yaw(), p.yaw()) < 1e-12);
            let inv = p.compose(&p.inverse());
            assert!(inv.translation.norm() < 1e-9 && inv.yaw().abs() < 1e-12);
        }
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_relative_eq!(wrap_angle(-PI), PI);
        assert_relative_eq!(wrap_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_relative_eq!(wrap_angle(0.5 + 4.0 * PI), 0.5, epsilon = 1e-12);
        assert_relative_eq!(angle_diff(PI - 0.1, -PI + 0.1), 0.2, epsilon = 1e-12);
    }

    #[test]
    fn huber_cases() {
        let n = RobustNorm::huber(2.0);
        assert_eq!(robust_eval(&n, &Vector2::zeros()), (0.0, 1.0));
        let (c, w) = robust_eval(&n, &Vector2::new(3.0, 4.0));
        assert_relative_eq!(c, 8.0);
        assert_relative_eq!(w, 0.4);
        let (c, _) = robust_eval(&n, &Vector2::new(1.0, 1.0));
        assert_relative_eq!(c, 1.0);
        assert!(RobustNorm::huber(0.0).validate().is_err());
    }

    #[test]
    fn huber_is_c1_at_threshold() {
        let n = RobustNorm::huber(2.0);
        let h = 1e-7;
        let d = n.threshold;
        let f = |s: f64| n.eval_norm(s).0;
        let left = (f(d) - f(d - h)) / h;
        let right = (f(d + h) - f(d)) / h;
        assert!((left - right).abs() < 1e-6);
        assert!((f(d) - f(d - 1e-12)).abs() < 1e-10);
    }

    proptest::proptest! {
        #[test]
        fn huber_bounded_and_monotone(a in 0.0f64..100.0, b in 0.0f64..100.0, delta in 0.01f64..10.0) {
            let n = RobustNorm::huber(delta);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (c_lo, _) = n.eval_norm(lo);
            let (c_hi, _) = n.eval_norm(hi);
            proptest::prop_assert!(c_lo <= c_hi + 1e-12);
            proptest::prop_assert!(c_hi <= 0.5 * hi * hi + 1e-9);
            if hi <= delta {
                proptest::prop_assert!((c_hi - 0.5 * hi * hi).abs() < 1e-12);
            }
        }
    }
}
