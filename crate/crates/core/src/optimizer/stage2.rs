use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::lm::{levenberg_marquardt, LmProblem, Termination, TraceRecord};
use super::{so3_right_jacobian_inv, OptimError, PoseSigma, SolverConfig};
use crate::geometry::{angle_diff, rot_z, skew, CameraIntrinsics, RelPose4, RigidTransform, RobustNorm};
use crate::place_index::KeyframeId;

type Matrix2x4 = SMatrix<f64, 2, 4>;
type Matrix2x6 = SMatrix<f64, 2, 6>;
type Matrix6 = SMatrix<f64, 6, 6>;
type Vector12 = SMatrix<f64, 12, 1>;
type Matrix12x4 = SMatrix<f64, 12, 4>;

const BEHIND_CAMERA_RESIDUAL: f64 = 1e4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AerialObservation {
    /// Index into [`StageTwoProblem::aerial_poses`].
    pub aerial: usize,
    /// Frozen landmark in the UGV world frame, `T_{W_G C_G} C_i`.
    pub point: Vector3<f64>,
    pub pixel: Vector2<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTwoProblem {
    /// Initial `T_{W_A W_G}`.
    pub relative: RelPose4,
    pub aerial_ids: Vec<KeyframeId>,
    /// `T_{W_A C_A}` per paired UAV frame, at their odometry values.
    pub aerial_poses: Vec<RigidTransform>,
    pub observations: Vec<AerialObservation>,
    /// Per-pair estimates of `T_{W_A W_G}`.
    pub anchors: Vec<RelPose4>,
}

/// Air-ground reprojection block. `d_relative` is with respect to `(x, y, z, yaw)`,
/// `d_aerial` with respect to the right-perturbation tangent `(omega, v)`.
#[derive(Clone, Copy, Debug)]
pub struct Eq4Block {
    pub residual: Vector2<f64>,
    pub d_relative: Matrix2x4,
    pub d_aerial: Matrix2x6,
}

/// `K_A (T_{W_A C_A}^-1 T_{W_A W_G} X) - p`; `None` behind the camera.
pub fn eq4_block(
    relative: &RelPose4,
    aerial_pose: &RigidTransform,
    point: &Vector3<f64>,
    pixel: &Vector2<f64>,
    k: &CameraIntrinsics,
) -> Option<Eq4Block> {
    let rz = rot_z(relative.yaw());
    let y = rz * point + relative.translation;
    let rjt = aerial_pose.rotation_matrix().transpose();
    let p = rjt * (y - aerial_pose.translation());
    if p.z <= 1e-9 {
        return None;
    }
    let jpi = k.project_jacobian(&p);
    let jy = jpi * rjt;
    let mut d_relative = Matrix2x4::zeros();
    d_relative.fixed_view_mut::<2, 3>(0, 0).copy_from(&jy);
    d_relative
        .column_mut(3)
        .copy_from(&(jy * rz * skew(&Vector3::z()) * point));
    let mut d_aerial = Matrix2x6::zeros();
    d_aerial.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jpi * skew(&p)));
    d_aerial.fixed_view_mut::<2, 3>(0, 3).copy_from(&(-jy));
    Some(Eq4Block {
        residual: k.project_unchecked(&p) - pixel,
        d_relative,
        d_aerial,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct Eq5Block {
    /// Upper 3x4 of `T A^-1 - I`, column-major; the bottom row is always zero.
    pub residual: Vector12,
    pub d_relative: Matrix12x4,
}

pub fn eq5_block(t: &RelPose4, anchor: &RelPose4) -> Eq5Block {
    let ainv = anchor.to_rigid().inverse();
    let ra = ainv.rotation_matrix();
    let ta = ainv.translation();
    let rz = rot_z(t.yaw());
    let m_rot = rz * ra - Matrix3::identity();
    let m_t = rz * ta + t.translation;
    let mut residual = Vector12::zeros();
    for c in 0..3 {
        residual.fixed_rows_mut::<3>(3 * c).copy_from(&m_rot.column(c));
    }
    residual.fixed_rows_mut::<3>(9).copy_from(&m_t);
    let drz = rz * skew(&Vector3::z());
    let d_rot = drz * ra;
    let d_t = drz * ta;
    let mut d_relative = Matrix12x4::zeros();
    for c in 0..3 {
        d_relative.fixed_view_mut::<3, 1>(3 * c, 3).copy_from(&d_rot.column(c));
    }
    d_relative.fixed_view_mut::<3, 3>(9, 0).copy_from(&Matrix3::identity());
    d_relative.fixed_view_mut::<3, 1>(9, 3).copy_from(&d_t);
    Eq5Block { residual, d_relative }
}

/// `sum_j || to_rigid(t) to_rigid(anchor_j)^-1 - I ||_F`.
pub fn eval_residual_eq5(t: &RelPose4, anchors: &[RelPose4]) -> f64 {
    anchors.iter().map(|a| eq5_block(t, a).residual.norm()).sum()
}

/// Robust air-ground reprojection cost of `problem` at the given variables.
pub fn eval_residual_eq4(
    relative: &RelPose4,
    aerial_poses: &[RigidTransform],
    observations: &[AerialObservation],
    k: &CameraIntrinsics,
    norm: &RobustNorm,
) -> f64 {
    observations
        .iter()
        .map(|o| match eq4_block(relative, &aerial_poses[o.aerial], &o.point, &o.pixel, k) {
            Some(b) => norm.eval(&b.residual).0,
            None => norm.eval_norm(BEHIND_CAMERA_RESIDUAL).0,
        })
        .sum()
}

/// Sample minimizing the summed absolute wrapped angle difference to all
/// others.
pub fn circular_median(angles: &[f64]) -> Option<f64> {
    angles
        .iter()
        .map(|&c| (c, angles.iter().map(|&a| angle_diff(a, c)).sum::<f64>()))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)))
        .map(|(c, _)| c)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Component-wise median translation and circular-median yaw.
pub fn median_relative(anchors: &[RelPose4]) -> Option<RelPose4> {
    if anchors.is_empty() {
        return None;
    }
    let t = Vector3::from_fn(|i, _| median(anchors.iter().map(|a| a.translation[i]).collect()));
    let yaw = circular_median(&anchors.iter().map(|a| a.yaw()).collect::<Vec<_>>())?;
    Some(RelPose4::new(t, yaw))
}

#[derive(Clone, Debug)]
pub struct Stage2Result {
    pub relative: RelPose4,
    pub aerial_poses: Vec<RigidTransform>,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub trace: Vec<TraceRecord>,
}

#[derive(Clone)]
struct State {
    relative: RelPose4,
    aerial: Vec<RigidTransform>,
}

struct Problem<'a> {
    p: &'a StageTwoProblem,
    k: &'a CameraIntrinsics,
    norm: &'a RobustNorm,
    w_reg: f64,
    prior: Option<PoseSigma>,
}

impl Problem<'_> {
    fn dim(&self) -> usize {
        4 + 6 * self.p.aerial_poses.len()
    }

    fn prior_block(&self, pose: &RigidTransform, prior: &RigidTransform, s: &PoseSigma) -> (Vector6<f64>, Matrix6) {
        let (phi, dt) = pose.local_difference(prior);
        let mut r = Vector6::zeros();
        r.fixed_rows_mut::<3>(0).copy_from(&(phi / s.rotation));
        r.fixed_rows_mut::<3>(3).copy_from(&(dt / s.translation));
        let mut j = Matrix6::zeros();
        j.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(so3_right_jacobian_inv(&phi) / s.rotation));
        j.fixed_view_mut::<3, 3>(3, 3)
            .copy_from(&(Matrix3::identity() / s.translation));
        (r, j)
    }
}

impl LmProblem for Problem<'_> {
    type State = State;
    type System = (DMatrix<f64>, DVector<f64>);

    fn cost(&self, s: &State) -> f64 {
        let mut c = eval_residual_eq4(&s.relative, &s.aerial, &self.p.observations, self.k, self.norm);
        for a in &self.p.anchors {
            c += 0.5 * self.w_reg * eq5_block(&s.relative, a).residual.norm_squared();
        }
        if let Some(sig) = &self.prior {
            for (pose, prior) in s.aerial.iter().zip(&self.p.aerial_poses) {
                c += 0.5 * self.prior_block(pose, prior, sig).0.norm_squared();
            }
        }
        c
    }

    fn linearize(&self, s: &State) -> (Self::System, f64) {
        let n = self.dim();
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        for o in &self.p.observations {
            let Some(b) = eq4_block(&s.relative, &s.aerial[o.aerial], &o.point, &o.pixel, self.k) else {
                continue;
            };
            let (_, w) = self.norm.eval(&b.residual);
            let off = 4 + 6 * o.aerial;
            let mut j = SMatrix::<f64, 2, 10>::zeros();
            j.fixed_view_mut::<2, 4>(0, 0).copy_from(&b.d_relative);
            j.fixed_view_mut::<2, 6>(0, 4).copy_from(&b.d_aerial);
            let jtj = w * j.transpose() * j;
            let jtr = w * j.transpose() * b.residual;
            let idx: [usize; 10] = std::array::from_fn(|i| if i < 4 { i } else { off + i - 4 });
            for (a, &ia) in idx.iter().enumerate() {
                g[ia] += jtr[a];
                for (c, &ic) in idx.iter().enumerate() {
                    h[(ia, ic)] += jtj[(a, c)];
                }
            }
        }
        for a in &self.p.anchors {
            let b = eq5_block(&s.relative, a);
            let mut blk = h.fixed_view_mut::<4, 4>(0, 0);
            blk += self.w_reg * b.d_relative.transpose() * b.d_relative;
            let mut gb = g.fixed_rows_mut::<4>(0);
            gb += self.w_reg * b.d_relative.transpose() * b.residual;
        }
        if let Some(sig) = &self.prior {
            for (i, (pose, prior)) in s.aerial.iter().zip(&self.p.aerial_poses).enumerate() {
                let (r, j) = self.prior_block(pose, prior, sig);
                let off = 4 + 6 * i;
                let mut blk = h.fixed_view_mut::<6, 6>(off, off);
                blk += j.transpose() * j;
                let mut gb = g.fixed_rows_mut::<6>(off);
                gb += j.transpose() * r;
            }
        }
        let gmax = g.amax();
        ((h, g), gmax)
    }

    fn solve(&self, (h, g): &Self::System, lambda: f64) -> Option<DVector<f64>> {
        let mut h = h.clone();
        for i in 0..h.nrows() {
            h[(i, i)] += lambda * h[(i, i)].max(1e-12);
        }
        let dx = h.cholesky()?.solve(&(-g));
        dx.iter().all(|v| v.is_finite()).then_some(dx)
    }

    fn retract(&self, s: &State, dx: &DVector<f64>) -> State {
        let relative = RelPose4::new(
            s.relative.translation + Vector3::new(dx[0], dx[1], dx[2]),
            s.relative.yaw() + dx[3],
        );
        let aerial = s
            .aerial
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let d = dx.fixed_rows::<6>(4 + 6 * i);
                p.retract(&d.fixed_rows::<3>(0).into(), &d.fixed_rows::<3>(3).into())
            })
            .collect();
        State { relative, aerial }
    }
}

/// Jointly refines `T_{W_A W_G}` (four parameters, so roll and pitch stay
/// exactly zero) and the paired UAV poses.
pub fn stage2_refine(
    problem: &StageTwoProblem,
    k_a: &CameraIntrinsics,
    norm: &RobustNorm,
    cfg: &SolverConfig,
) -> Result<Stage2Result, OptimError> {
    cfg.validate()?;
    if problem.anchors.is_empty() {
        return Err(OptimError::NoCovisibility);
    }
    if problem.observations.iter().any(|o| o.aerial >= problem.aerial_poses.len()) {
        return Err(OptimError::InvalidInput("observation references a missing UAV frame".into()));
    }
    let lm = Problem {
        p: problem,
        k: k_a,
        norm,
        w_reg: cfg.w_reg,
        prior: cfg.uav_pose_prior,
    };
    let init = State {
        relative: problem.relative,
        aerial: problem.aerial_poses.clone(),
    };
    let out = levenberg_marquardt(&lm, init, cfg, 2)?;
    Ok(Stage2Result {
        relative: out.state.relative,
        aerial_poses: out.state.aerial,
        initial_cost: out.initial_cost,
        final_cost: out.final_cost,
        iterations: out.iterations,
        termination: out.termination,
        trace: out.trace,
    })
}

/// Dense 4x4 oracle for the regularizer, kept independent of [`eq5_block`].
#[cfg(test)]
fn eq5_matrix_oracle(t: &RelPose4, anchors: &[RelPose4]) -> f64 {
    let tm = t.to_rigid().to_matrix();
    anchors
        .iter()
        .map(|a| {
            let inv = a.to_rigid().to_matrix().try_inverse().unwrap();
            (tm * inv - nalgebra::Matrix4::identity()).norm()
        })
        .sum()
}
