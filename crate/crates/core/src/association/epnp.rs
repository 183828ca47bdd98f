//! Closed-form Perspective-n-Point with four virtual control points.
//!
//! Every 3-D point is written as an affine combination of four control points
//! taken from the principal axes of the point cloud. The camera-frame control
//! points lie in the null space of a `2n x 12` system built from the pixels;
//! the null-space coefficients are recovered from the preserved inter-control
//! distances (three linearizations, each polished by Gauss-Newton) and the
//! candidate with the lowest reprojection error is kept.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SymmetricEigen, Vector2, Vector3, Vector4, SVD};

use super::AssociationError;
use crate::geometry::{CameraIntrinsics, RigidTransform};

type Matrix12 = SMatrix<f64, 12, 12>;
type Vector12 = SMatrix<f64, 12, 1>;

const PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

/// Pose mapping the `points` frame into the camera frame.
pub fn epnp(
    points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    k: &CameraIntrinsics,
) -> Result<RigidTransform, AssociationError> {
    Ok(epnp_with_error(points, pixels, k)?.0)
}

/// Like [`epnp`], also returning the mean reprojection error in pixels.
pub fn epnp_with_error(
    points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    k: &CameraIntrinsics,
) -> Result<(RigidTransform, f64), AssociationError> {
    let n = points.len();
    if n < 4 || pixels.len() != n {
        return Err(AssociationError::DegenerateGeometry(format!(
            "need >= 4 correspondences, got {n}"
        )));
    }
    let controls = choose_control_points(points)?;
    let alphas = barycentric(points, &controls)?;

    let mut mtm = Matrix12::zeros();
    for (alpha, px) in alphas.iter().zip(pixels) {
        let mut r0 = Vector12::zeros();
        let mut r1 = Vector12::zeros();
        for j in 0..4 {
            let a = alpha[j];
            r0[3 * j] = a * k.fx;
            r0[3 * j + 2] = a * (k.cx - px.x);
            r1[3 * j + 1] = a * k.fy;
            r1[3 * j + 2] = a * (k.cy - px.y);
        }
        mtm += r0 * r0.transpose() + r1 * r1.transpose();
    }
    let eig = SymmetricEigen::new(mtm);
    let mut order: Vec<usize> = (0..12).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let null: [Vector12; 4] = std::array::from_fn(|i| eig.eigenvectors.column(order[i]).into_owned());

    let l = build_l6x10(&null);
    let rho: [f64; 6] = std::array::from_fn(|r| {
        let (a, b) = PAIRS[r];
        (controls[a] - controls[b]).norm_squared()
    });

    let mut best: Option<(RigidTransform, f64)> = None;
    for betas in [betas_approx_1(&l, &rho), betas_approx_2(&l, &rho), betas_approx_3(&l, &rho)] {
        let Some(mut betas) = betas else { continue };
        gauss_newton(&l, &rho, &mut betas);
        let Some(pose) = pose_from_betas(&betas, &null, &alphas, points) else {
            continue;
        };
        let err = mean_reprojection_error(&pose, points, pixels, k);
        if err.is_finite() && best.as_ref().is_none_or(|(_, e)| err < *e) {
            best = Some((pose, err));
        }
    }
    best.ok_or_else(|| AssociationError::DegenerateGeometry("no valid EPnP solution".into()))
}

pub fn mean_reprojection_error(
    pose: &RigidTransform,
    points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    k: &CameraIntrinsics,
) -> f64 {
    let mut sum = 0.0;
    for (p, px) in points.iter().zip(pixels) {
        let c = pose.transform_point(p);
        if c.z <= 1e-9 {
            return f64::INFINITY;
        }
        sum += (k.project_unchecked(&c) - px).norm();
    }
    sum / points.len() as f64
}

fn choose_control_points(points: &[Vector3<f64>]) -> Result<[Vector3<f64>; 4], AssociationError> {
    let n = points.len() as f64;
    let c0 = points.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - c0;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lmax = eig.eigenvalues[order[0]];
    let lmin = eig.eigenvalues[order[2]];
    if !(lmax > 1e-18) || lmin <= 1e-10 * lmax {
        return Err(AssociationError::DegenerateGeometry(
            "points are coplanar or collinear".into(),
        ));
    }
    let mut cps = [c0; 4];
    for (slot, &i) in cps.iter_mut().skip(1).zip(order.iter()) {
        let axis: Vector3<f64> = eig.eigenvectors.column(i).into_owned();
        *slot = c0 + axis * (eig.eigenvalues[i] / n).sqrt();
    }
    Ok(cps)
}

fn barycentric(points: &[Vector3<f64>], cps: &[Vector3<f64>; 4]) -> Result<Vec<Vector4<f64>>, AssociationError> {
    let basis = Matrix3::from_columns(&[cps[1] - cps[0], cps[2] - cps[0], cps[3] - cps[0]]);
    let inv = basis
        .try_inverse()
        .ok_or_else(|| AssociationError::DegenerateGeometry("singular control basis".into()))?;
    Ok(points
        .iter()
        .map(|p| {
            let a = inv * (p - cps[0]);
            Vector4::new(1.0 - a.x - a.y - a.z, a.x, a.y, a.z)
        })
        .collect())
}

fn control_delta(v: &Vector12, a: usize, b: usize) -> Vector3<f64> {
    Vector3::new(v[3 * a] - v[3 * b], v[3 * a + 1] - v[3 * b + 1], v[3 * a + 2] - v[3 * b + 2])
}

/// Rows map the ten products `[b11 b12 b22 b13 b23 b33 b14 b24 b34 b44]` to
/// squared inter-control distances.
fn build_l6x10(null: &[Vector12; 4]) -> [[f64; 10]; 6] {
    let mut l = [[0.0; 10]; 6];
    for (r, &(a, b)) in PAIRS.iter().enumerate() {
        let dv: [Vector3<f64>; 4] = std::array::from_fn(|k| control_delta(&null[k], a, b));
        l[r] = [
            dv[0].dot(&dv[0]),
            2.0 * dv[0].dot(&dv[1]),
            dv[1].dot(&dv[1]),
            2.0 * dv[0].dot(&dv[2]),
            2.0 * dv[1].dot(&dv[2]),
            dv[2].dot(&dv[2]),
            2.0 * dv[0].dot(&dv[3]),
            2.0 * dv[1].dot(&dv[3]),
            2.0 * dv[2].dot(&dv[3]),
            dv[3].dot(&dv[3]),
        ];
    }
    l
}

fn lstsq(l: &[[f64; 10]; 6], cols: &[usize], rho: &[f64; 6]) -> Option<DVector<f64>> {
    let a = DMatrix::from_fn(6, cols.len(), |r, c| l[r][cols[c]]);
    let b = DVector::from_column_slice(rho);
    SVD::new(a, true, true).solve(&b, 1e-14).ok()
}

fn betas_approx_1(l: &[[f64; 10]; 6], rho: &[f64; 6]) -> Option<[f64; 4]> {
    let b = lstsq(l, &[0, 1, 3, 6], rho)?;
    if b[0].abs() < 1e-300 {
        return None;
    }
    Some(if b[0] < 0.0 {
        let b0 = (-b[0]).sqrt();
        [b0, -b[1] / b0, -b[2] / b0, -b[3] / b0]
    } else {
        let b0 = b[0].sqrt();
        [b0, b[1] / b0, b[2] / b0, b[3] / b0]
    })
}

fn betas_approx_2(l: &[[f64; 10]; 6], rho: &[f64; 6]) -> Option<[f64; 4]> {
    let b = lstsq(l, &[0, 1, 2], rho)?;
    let (mut b0, b1) = if b[0] < 0.0 {
        ((-b[0]).sqrt(), if b[2] < 0.0 { (-b[2]).sqrt() } else { 0.0 })
    } else {
        (b[0].sqrt(), if b[2] > 0.0 { b[2].sqrt() } else { 0.0 })
    };
    if b[1] < 0.0 {
        b0 = -b0;
    }
    Some([b0, b1, 0.0, 0.0])
}

fn betas_approx_3(l: &[[f64; 10]; 6], rho: &[f64; 6]) -> Option<[f64; 4]> {
    let b = lstsq(l, &[0, 1, 2, 3, 4], rho)?;
    let (mut b0, b1) = if b[0] < 0.0 {
        ((-b[0]).sqrt(), if b[2] < 0.0 { (-b[2]).sqrt() } else { 0.0 })
    } else {
        (b[0].sqrt(), if b[2] > 0.0 { b[2].sqrt() } else { 0.0 })
    };
    if b[1] < 0.0 {
        b0 = -b0;
    }
    if b0.abs() < 1e-300 {
        return None;
    }
    Some([b0, b1, b[3] / b0, 0.0])
}

fn gauss_newton(l: &[[f64; 10]; 6], rho: &[f64; 6], betas: &mut [f64; 4]) {
    for _ in 0..20 {
        let b = *betas;
        let mut a = DMatrix::zeros(6, 4);
        let mut res = DVector::zeros(6);
        for r in 0..6 {
            let lr = &l[r];
            a[(r, 0)] = 2.0 * lr[0] * b[0] + lr[1] * b[1] + lr[3] * b[2] + lr[6] * b[3];
            a[(r, 1)] = lr[1] * b[0] + 2.0 * lr[2] * b[1] + lr[4] * b[2] + lr[7] * b[3];
            a[(r, 2)] = lr[3] * b[0] + lr[4] * b[1] + 2.0 * lr[5] * b[2] + lr[8] * b[3];
            a[(r, 3)] = lr[6] * b[0] + lr[7] * b[1] + lr[8] * b[2] + 2.0 * lr[9] * b[3];
            let model = lr[0] * b[0] * b[0]
                + lr[1] * b[0] * b[1]
                + lr[2] * b[1] * b[1]
                + lr[3] * b[0] * b[2]
                + lr[4] * b[1] * b[2]
                + lr[5] * b[2] * b[2]
                + lr[6] * b[0] * b[3]
                + lr[7] * b[1] * b[3]
                + lr[8] * b[2] * b[3]
                + lr[9] * b[3] * b[3];
            res[r] = rho[r] - model;
        }
        let Ok(dx) = SVD::new(a, true, true).solve(&res, 1e-14) else {
            return;
        };
        if dx.iter().any(|v| !v.is_finite()) {
            return;
        }
        for i in 0..4 {
            betas[i] += dx[i];
        }
    }
}

fn pose_from_betas(
    betas: &[f64; 4],
    null: &[Vector12; 4],
    alphas: &[Vector4<f64>],
    points: &[Vector3<f64>],
) -> Option<RigidTransform> {
    let mut cc = Vector12::zeros();
    for (b, v) in betas.iter().zip(null) {
        cc += v * *b;
    }
    let ccs: [Vector3<f64>; 4] = std::array::from_fn(|j| Vector3::new(cc[3 * j], cc[3 * j + 1], cc[3 * j + 2]));
    let mut pcs: Vec<Vector3<f64>> = alphas
        .iter()
        .map(|a| ccs[0] * a[0] + ccs[1] * a[1] + ccs[2] * a[2] + ccs[3] * a[3])
        .collect();
    let mean_z = pcs.iter().map(|p| p.z).sum::<f64>();
    if mean_z < 0.0 {
        for p in pcs.iter_mut() {
            *p = -*p;
        }
    }
    absolute_orientation(points, &pcs)
}

/// Least-squares rigid transform with `dst ~ R src + t`.
pub fn absolute_orientation(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Option<RigidTransform> {
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (d - cd) * (s - cs).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u?;
    let vt = svd.v_t?;
    let mut fix = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = u * fix * vt;
    if r.iter().any(|x| !x.is_finite()) {
        return None;
    }
    let t = cd - r * cs;
    Some(RigidTransform::from_rotation_matrix(&r, t))
}

/// Motion-only Levenberg-Marquardt on the reprojection error, starting from
/// `init`. Returns `init` unchanged if no step lowers the cost.
pub fn refine_pose(
    init: &RigidTransform,
    points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    k: &CameraIntrinsics,
    max_iterations: usize,
) -> RigidTransform {
    let cost = |pose: &RigidTransform| -> f64 {
        points
            .iter()
            .zip(pixels)
            .map(|(p, px)| {
                let c = pose.transform_point(p);
                if c.z <= 1e-9 {
                    f64::INFINITY
                } else {
                    (k.project_unchecked(&c) - px).norm_squared()
                }
            })
            .sum()
    };
    let mut pose = *init;
    let mut current = cost(&pose);
    let mut lambda = 1e-4;
    for _ in 0..max_iterations {
        if !current.is_finite() {
            break;
        }
        let r = pose.rotation_matrix();
        let mut h = SMatrix::<f64, 6, 6>::zeros();
        let mut g = SMatrix::<f64, 6, 1>::zeros();
        for (p, px) in points.iter().zip(pixels) {
            let c = pose.transform_point(p);
            let jp = k.project_jacobian(&c);
            let mut jc = SMatrix::<f64, 3, 6>::zeros();
            jc.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-r * crate::geometry::skew(p)));
            jc.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
            let j = jp * jc;
            let e = k.project_unchecked(&c) - px;
            h += j.transpose() * j;
            g += j.transpose() * e;
        }
        if g.amax() < 1e-12 {
            break;
        }
        let mut improved = false;
        for _ in 0..10 {
            let mut damped = h;
            for i in 0..6 {
                damped[(i, i)] += lambda * (1.0 + h[(i, i)]);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-g))) else {
                lambda *= 10.0;
                continue;
            };
            let next = pose.retract(&step.fixed_rows::<3>(0).into_owned(), &step.fixed_rows::<3>(3).into_owned());
            let c = cost(&next);
            if c < current {
                pose = next;
                current = c;
                lambda = (lambda * 0.1).max(1e-12);
                improved = step.amax() > 1e-14;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    pose
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(450.0, 450.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn scene(rng: &mut ChaCha8Rng, pose: &RigidTransform, n: usize) -> (Vec<Vector3<f64>>, Vec<Vector2<f64>>) {
        let inv = pose.inverse();
        let mut pts = Vec::new();
        let mut pix = Vec::new();
        while pts.len() < n {
            let c = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0), rng.random_range(4.0..10.0));
            let px = k().project(&c).unwrap();
            if !k().contains(&px) {
                continue;
            }
            pts.push(inv.transform_point(&c));
            pix.push(px);
        }
        (pts, pix)
    }

    #[test]
    fn identity_pose_noiseless() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (pts, pix) = scene(&mut rng, &RigidTransform::identity(), 20);
        let pose = epnp(&pts, &pix, &k()).unwrap();
        assert!(pose.rotation().angle() < 1e-6);
        assert!(pose.translation().norm() < 1e-6);
    }

    #[test]
    fn random_poses_noiseless() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let truth = RigidTransform::new(
                UnitQuaternion::from_euler_angles(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-3.0..3.0),
                ),
                Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
            );
            let (pts, pix) = scene(&mut rng, &truth, 20);
            let (pose, err) = epnp_with_error(&pts, &pix, &k()).unwrap();
            assert!(err < 1e-6, "{err}");
            assert!(pose.rotation_angle_to(&truth) < 1e-4);
            assert!((pose.translation() - truth.translation()).norm() < 1e-4);
        }
    }

    #[test]
    fn minimal_four_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = RigidTransform::new(UnitQuaternion::from_euler_angles(0.1, -0.2, 0.3), Vector3::new(0.5, -0.2, 1.0));
        let mut ok = 0;
        for _ in 0..50 {
            let (pts, pix) = scene(&mut rng, &truth, 4);
            if let Ok(pose) = epnp(&pts, &pix, &k()) {
                if pose.rotation_angle_to(&truth) < 1e-3 {
                    ok += 1;
                }
            }
        }
        assert!(ok >= 40, "{ok}/50");
    }

    #[test]
    fn coplanar_is_degenerate() {
        let pts: Vec<_> = (0..10).map(|i| Vector3::new(i as f64, (i * i) as f64 * 0.1, 5.0)).collect();
        let pix: Vec<_> = pts.iter().map(|p| k().project(p).unwrap()).collect();
        assert!(matches!(epnp(&pts, &pix, &k()), Err(AssociationError::DegenerateGeometry(_))));
        assert!(epnp(&pts[..3], &pix[..3], &k()).is_err());
    }

    #[test]
    fn absolute_orientation_recovers_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = RigidTransform::new(UnitQuaternion::from_euler_angles(0.3, 0.2, -1.0), Vector3::new(1.0, 2.0, 3.0));
        let src: Vec<_> = (0..10)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let dst: Vec<_> = src.iter().map(|p| t.transform_point(p)).collect();
        let got = absolute_orientation(&src, &dst).unwrap();
        assert!(got.rotation_angle_to(&t) < 1e-12);
        assert!((got.translation() - t.translation()).norm() < 1e-12);
    }
}
