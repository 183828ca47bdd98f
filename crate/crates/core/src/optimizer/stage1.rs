use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, SMatrix, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::lm::{levenberg_marquardt, LmOutcome, LmProblem, Termination, TraceRecord};
use super::{so3_right_jacobian_inv, OptimError, PoseSigma, SolverConfig};
use crate::geometry::{skew, CameraIntrinsics, RigidTransform, RobustNorm};
use crate::place_index::KeyframeId;

type Matrix2x6 = SMatrix<f64, 2, 6>;
type Matrix6 = SMatrix<f64, 6, 6>;

/// Cost charged for an observation that lands behind its camera.
const BEHIND_CAMERA_RESIDUAL: f64 = 1e4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowFrame {
    pub id: KeyframeId,
    /// `T_{W_G C_G}`.
    pub pose: RigidTransform,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Index into [`SlidingWindow::frames`].
    pub frame: usize,
    pub keypoint: usize,
    pub pixel: Vector2<f64>,
}

/// Landmark stored as an anchor pixel plus inverse depth: the camera-frame
/// point is `normalized_bearing(anchor_pixel) / inv_depth` in the anchor frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub anchor: usize,
    pub anchor_pixel: Vector2<f64>,
    pub inv_depth: f64,
    /// Inverse depth measured from the voxel map, if any.
    pub depth_prior: Option<f64>,
    /// Includes the anchor observation.
    pub observations: Vec<Observation>,
}

impl Landmark {
    pub fn point_in_anchor(&self, k: &CameraIntrinsics) -> Vector3<f64> {
        k.normalized_bearing(&self.anchor_pixel) / self.inv_depth
    }

    pub fn position_world(&self, frames: &[WindowFrame], k: &CameraIntrinsics) -> Vector3<f64> {
        frames[self.anchor].pose.transform_point(&self.point_in_anchor(k))
    }

    pub fn is_variable(&self) -> bool {
        self.depth_prior.is_some() || self.observations.iter().any(|o| o.frame != self.anchor)
    }

    /// Number of distinct frames observing the landmark.
    pub fn view_count(&self) -> usize {
        let mut f: Vec<_> = self.observations.iter().map(|o| o.frame).collect();
        f.sort_unstable();
        f.dedup();
        f.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SlidingWindow {
    pub capacity: usize,
    pub frames: Vec<WindowFrame>,
    pub landmarks: Vec<Landmark>,
}

impl SlidingWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            frames: Vec::with_capacity(capacity),
            landmarks: Vec::new(),
        }
    }

    /// Appends a frame, evicting the oldest when full. Landmarks index frames
    /// by position, so they are cleared whenever the frame list changes.
    pub fn push_frame(&mut self, f: WindowFrame) {
        if self.frames.len() == self.capacity {
            self.frames.remove(0);
        }
        self.frames.push(f);
        self.landmarks.clear();
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: &str| Err(OptimError::InvalidInput(m.to_string()));
        if self.frames.len() > self.capacity {
            return bad("window over capacity");
        }
        if self.frames.windows(2).any(|w| w[0].id >= w[1].id) {
            return bad("frames not time-ordered");
        }
        for l in &self.landmarks {
            if !(l.inv_depth > 0.0) || l.anchor >= self.frames.len() {
                return bad("landmark with invalid anchor or inverse depth");
            }
            if l.observations.iter().any(|o| o.frame >= self.frames.len()) {
                return bad("observation references a missing frame");
            }
        }
        Ok(())
    }
}

/// One window reprojection block with derivatives in the right-perturbation
/// tangent `(omega, v)` of both poses and in the inverse depth.
#[derive(Clone, Copy, Debug)]
pub struct Eq2Block {
    pub residual: Vector2<f64>,
    pub d_anchor: Matrix2x6,
    pub d_observer: Matrix2x6,
    pub d_inv_depth: Vector2<f64>,
}

/// `None` when the landmark falls behind the observing camera.
pub fn eq2_block(
    anchor_pose: &RigidTransform,
    observer_pose: &RigidTransform,
    anchor_pixel: &Vector2<f64>,
    inv_depth: f64,
    pixel: &Vector2<f64>,
    k: &CameraIntrinsics,
) -> Option<Eq2Block> {
    let b = k.normalized_bearing(anchor_pixel);
    let local = b / inv_depth;
    let ra = anchor_pose.rotation_matrix();
    let x = ra * local + anchor_pose.translation();
    let rjt = observer_pose.rotation_matrix().transpose();
    let p = rjt * (x - observer_pose.translation());
    if p.z <= 1e-9 {
        return None;
    }
    let jpi = k.project_jacobian(&p);
    let residual = k.project_unchecked(&p) - pixel;

    let mut d_observer = Matrix2x6::zeros();
    d_observer.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jpi * skew(&p)));
    d_observer.fixed_view_mut::<2, 3>(0, 3).copy_from(&(-jpi * rjt));

    let jx: Matrix2x3<f64> = jpi * rjt;
    let mut d_anchor = Matrix2x6::zeros();
    d_anchor.fixed_view_mut::<2, 3>(0, 0).copy_from(&(-jx * ra * skew(&local)));
    d_anchor.fixed_view_mut::<2, 3>(0, 3).copy_from(&jx);

    let d_inv_depth = jx * (-ra * b / (inv_depth * inv_depth));
    Some(Eq2Block {
        residual,
        d_anchor,
        d_observer,
        d_inv_depth,
    })
}

/// Robust reprojection cost over every non-anchor observation, and the
/// per-observation residuals in landmark order. Observations behind their
/// camera are omitted.
pub fn eval_residual_eq2(window: &SlidingWindow, k: &CameraIntrinsics, norm: &RobustNorm) -> (f64, Vec<Vector2<f64>>) {
    let mut cost = 0.0;
    let mut res = Vec::new();
    for l in &window.landmarks {
        for o in &l.observations {
            if o.frame == l.anchor {
                continue;
            }
            let fa = &window.frames[l.anchor].pose;
            let fo = &window.frames[o.frame].pose;
            if let Some(b) = eq2_block(fa, fo, &l.anchor_pixel, l.inv_depth, &o.pixel, k) {
                cost += norm.eval(&b.residual).0;
                res.push(b.residual);
            }
        }
    }
    (cost, res)
}

#[derive(Clone, Debug)]
pub struct Stage1Result {
    pub window: SlidingWindow,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub trace: Vec<TraceRecord>,
}

#[derive(Clone)]
struct State {
    poses: Vec<RigidTransform>,
    rho: Vec<f64>,
}

struct Problem<'a> {
    window: &'a SlidingWindow,
    k: &'a CameraIntrinsics,
    norm: &'a RobustNorm,
    pose_var: Vec<Option<usize>>,
    n_pose: usize,
    lm_var: Vec<Option<usize>>,
    n_lm: usize,
    priors: Vec<RigidTransform>,
    pose_sigma: Option<PoseSigma>,
    depth_sigma: Option<f64>,
}

struct System {
    hpp: DMatrix<f64>,
    gp: DVector<f64>,
    hll: Vec<f64>,
    gl: Vec<f64>,
    hpl: Vec<Vec<(usize, Vector6<f64>)>>,
}

impl Problem<'_> {
    fn pose_prior(&self, pose: &RigidTransform, prior: &RigidTransform, s: &PoseSigma) -> (Vector6<f64>, Matrix6) {
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

    fn depth_prior(&self, rho: f64, l: &Landmark) -> Option<(f64, f64)> {
        let (rho0, sd) = (l.depth_prior?, self.depth_sigma?);
        let s = sd * rho0 * rho0;
        Some(((rho - rho0) / s, 1.0 / s))
    }
}

impl LmProblem for Problem<'_> {
    type State = State;
    type System = System;

    fn cost(&self, s: &State) -> f64 {
        let mut c = 0.0;
        for (li, l) in self.window.landmarks.iter().enumerate() {
            let rho = s.rho[li];
            if !(rho > 0.0) {
                return f64::INFINITY;
            }
            for o in &l.observations {
                if o.frame == l.anchor {
                    continue;
                }
                c += match eq2_block(&s.poses[l.anchor], &s.poses[o.frame], &l.anchor_pixel, rho, &o.pixel, self.k) {
                    Some(b) => self.norm.eval(&b.residual).0,
                    None => self.norm.eval_norm(BEHIND_CAMERA_RESIDUAL).0,
                };
            }
            if self.lm_var[li].is_some() {
                if let Some((r, _)) = self.depth_prior(rho, l) {
                    c += 0.5 * r * r;
                }
            }
        }
        if let Some(sig) = &self.pose_sigma {
            for (f, pv) in self.pose_var.iter().enumerate() {
                if pv.is_some() {
                    let (r, _) = self.pose_prior(&s.poses[f], &self.priors[f], sig);
                    c += 0.5 * r.norm_squared();
                }
            }
        }
        c
    }

    fn linearize(&self, s: &State) -> (System, f64) {
        let np = 6 * self.n_pose;
        let mut sys = System {
            hpp: DMatrix::zeros(np, np),
            gp: DVector::zeros(np),
            hll: vec![0.0; self.n_lm],
            gl: vec![0.0; self.n_lm],
            hpl: vec![Vec::new(); self.n_lm],
        };
        for (li, l) in self.window.landmarks.iter().enumerate() {
            let lv = self.lm_var[li];
            for o in &l.observations {
                if o.frame == l.anchor {
                    continue;
                }
                let Some(b) =
                    eq2_block(&s.poses[l.anchor], &s.poses[o.frame], &l.anchor_pixel, s.rho[li], &o.pixel, self.k)
                else {
                    continue;
                };
                let (_, w) = self.norm.eval(&b.residual);
                let blocks = [(self.pose_var[l.anchor], b.d_anchor), (self.pose_var[o.frame], b.d_observer)];
                for (pa, ja) in &blocks {
                    let Some(pa) = pa else { continue };
                    let ga = w * ja.transpose() * b.residual;
                    let mut g = sys.gp.fixed_rows_mut::<6>(6 * pa);
                    g += ga;
                    for (pb, jb) in &blocks {
                        let Some(pb) = pb else { continue };
                        let h = w * ja.transpose() * jb;
                        let mut blk = sys.hpp.fixed_view_mut::<6, 6>(6 * pa, 6 * pb);
                        blk += h;
                    }
                    if let Some(lv) = lv {
                        let h = w * ja.transpose() * b.d_inv_depth;
                        match sys.hpl[lv].iter_mut().find(|(p, _)| p == pa) {
                            Some((_, acc)) => *acc += h,
                            None => sys.hpl[lv].push((*pa, h)),
                        }
                    }
                }
                if let Some(lv) = lv {
                    sys.hll[lv] += w * b.d_inv_depth.norm_squared();
                    sys.gl[lv] += w * b.d_inv_depth.dot(&b.residual);
                }
            }
            if let Some(lv) = lv {
                if let Some((r, j)) = self.depth_prior(s.rho[li], l) {
                    sys.hll[lv] += j * j;
                    sys.gl[lv] += j * r;
                }
            }
        }
        if let Some(sig) = &self.pose_sigma {
            for (f, pv) in self.pose_var.iter().enumerate() {
                let Some(p) = pv else { continue };
                let (r, j) = self.pose_prior(&s.poses[f], &self.priors[f], sig);
                let mut blk = sys.hpp.fixed_view_mut::<6, 6>(6 * p, 6 * p);
                blk += j.transpose() * j;
                let mut g = sys.gp.fixed_rows_mut::<6>(6 * p);
                g += j.transpose() * r;
            }
        }
        let gmax = sys.gp.amax().max(sys.gl.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        (sys, gmax)
    }

    fn solve(&self, sys: &System, lambda: f64) -> Option<DVector<f64>> {
        let np = 6 * self.n_pose;
        let mut s = sys.hpp.clone();
        for i in 0..np {
            s[(i, i)] += lambda * s[(i, i)].max(1e-12);
        }
        let mut rhs = -sys.gp.clone();
        let hll: Vec<f64> = sys.hll.iter().map(|h| h + lambda * h.max(1e-12)).collect();
        for lv in 0..self.n_lm {
            let inv = 1.0 / hll[lv];
            if !inv.is_finite() || inv <= 0.0 {
                return None;
            }
            for (pa, ha) in &sys.hpl[lv] {
                let mut r = rhs.fixed_rows_mut::<6>(6 * pa);
                r += ha * (sys.gl[lv] * inv);
                for (pb, hb) in &sys.hpl[lv] {
                    let mut blk = s.fixed_view_mut::<6, 6>(6 * pa, 6 * pb);
                    blk -= ha * hb.transpose() * inv;
                }
            }
        }
        let dp = if np > 0 { s.cholesky()?.solve(&rhs) } else { DVector::zeros(0) };
        let mut dx = DVector::zeros(np + self.n_lm);
        dx.rows_mut(0, np).copy_from(&dp);
        for lv in 0..self.n_lm {
            let coupling: f64 = sys.hpl[lv].iter().map(|(p, h)| h.dot(&dp.fixed_rows::<6>(6 * p))).sum();
            dx[np + lv] = (-sys.gl[lv] - coupling) / hll[lv];
        }
        if dx.iter().all(|v| v.is_finite()) {
            Some(dx)
        } else {
            None
        }
    }

    fn retract(&self, s: &State, dx: &DVector<f64>) -> State {
        let mut out = s.clone();
        for (f, pv) in self.pose_var.iter().enumerate() {
            if let Some(p) = pv {
                let d = dx.fixed_rows::<6>(6 * p);
                out.poses[f] = s.poses[f].retract(&d.fixed_rows::<3>(0).into(), &d.fixed_rows::<3>(3).into());
            }
        }
        let np = 6 * self.n_pose;
        for (li, lv) in self.lm_var.iter().enumerate() {
            if let Some(lv) = lv {
                out.rho[li] = s.rho[li] + dx[np + lv];
            }
        }
        out
    }
}

/// Levenberg-Marquardt over window poses and inverse depths with the
/// landmark blocks eliminated by a Schur complement.
pub fn stage1_refine(
    window: &SlidingWindow,
    k: &CameraIntrinsics,
    norm: &RobustNorm,
    cfg: &SolverConfig,
) -> Result<Stage1Result, OptimError> {
    cfg.validate()?;
    window.validate()?;
    if window.frames.len() < 2 {
        return Err(OptimError::InvalidInput("stage 1 needs at least two frames".into()));
    }
    let mut pose_var = Vec::with_capacity(window.frames.len());
    let mut n_pose = 0;
    for f in 0..window.frames.len() {
        if f == 0 && (cfg.freeze_oldest || cfg.ugv_pose_prior.is_none()) {
            pose_var.push(None);
        } else {
            pose_var.push(Some(n_pose));
            n_pose += 1;
        }
    }
    let mut lm_var = Vec::with_capacity(window.landmarks.len());
    let mut n_lm = 0;
    for l in &window.landmarks {
        let variable = l.is_variable() && (l.depth_prior.is_some() && cfg.depth_prior_sigma.is_some() || l.view_count() >= 2);
        if variable {
            lm_var.push(Some(n_lm));
            n_lm += 1;
        } else {
            lm_var.push(None);
        }
    }
    let problem = Problem {
        window,
        k,
        norm,
        pose_var,
        n_pose,
        lm_var,
        n_lm,
        priors: window.frames.iter().map(|f| f.pose).collect(),
        pose_sigma: cfg.ugv_pose_prior,
        depth_sigma: cfg.depth_prior_sigma,
    };
    let init = State {
        poses: problem.priors.clone(),
        rho: window.landmarks.iter().map(|l| l.inv_depth).collect(),
    };
    let LmOutcome {
        state,
        initial_cost,
        final_cost,
        iterations,
        termination,
        trace,
    } = levenberg_marquardt(&problem, init, cfg, 1)?;
    let mut out = window.clone();
    for (f, p) in out.frames.iter_mut().zip(state.poses) {
        f.pose = p;
    }
    for (l, r) in out.landmarks.iter_mut().zip(state.rho) {
        l.inv_depth = r;
    }
    Ok(Stage1Result {
        window: out,
        initial_cost,
        final_cost,
        iterations,
        termination,
        trace,
    })
}
