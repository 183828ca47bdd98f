//! Two-stage robust bundle adjustment.
//!
//! Stage 1 refines UGV camera poses and inverse-depth landmarks inside a
//! sliding window. Stage 2 freezes those results and refines the 4-DoF
//! relative pose together with the paired UAV camera poses against
//! air-ground reprojection and a relative-pose regularizer.

mod lm;
mod stage1;
mod stage2;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use lm::{LmOutcome, Termination, TraceRecord};
pub use stage1::{
    eq2_block, eval_residual_eq2, stage1_refine, Eq2Block, Landmark, Observation, SlidingWindow, Stage1Result,
    WindowFrame,
};
pub use stage2::{
    circular_median, eq4_block, eq5_block, eval_residual_eq4, eval_residual_eq5, median_relative, stage2_refine,
    AerialObservation, Eq4Block, Eq5Block, Stage2Result, StageTwoProblem,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("normal equations are singular beyond damping rescue")]
    RankDeficient,
    #[error("no convergence after {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("no air-ground pair available")]
    NoCovisibility,
    #[error("invalid problem: {0}")]
    InvalidInput(String),
}

/// Standard deviations of a pose prior.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSigma {
    pub translation: f64,
    pub rotation: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub gradient_tol: f64,
    pub param_tol: f64,
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    pub w_reg: f64,
    /// Hold the oldest window frame fixed in stage 1. The frame is held
    /// regardless when `ugv_pose_prior` is off, since nothing else fixes the
    /// gauge.
    pub freeze_oldest: bool,
    /// Prior tying stage-1 UGV poses to their odometry values.
    pub ugv_pose_prior: Option<PoseSigma>,
    /// Prior tying stage-2 UAV poses to their odometry values.
    pub uav_pose_prior: Option<PoseSigma>,
    /// Prior on voxel-map depths, in meters. Off by default: map depths only
    /// initialize landmarks.
    pub depth_prior_sigma: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            gradient_tol: 1e-8,
            param_tol: 1e-10,
            initial_damping: 1e-4,
            damping_up: 10.0,
            damping_down: 0.1,
            w_reg: 100.0,
            freeze_oldest: false,
            ugv_pose_prior: Some(PoseSigma {
                translation: 0.01,
                rotation: 0.5f64.to_radians(),
            }),
            uav_pose_prior: Some(PoseSigma {
                translation: 0.01,
                rotation: 0.5f64.to_radians(),
            }),
            depth_prior_sigma: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        let ok = self.max_iterations > 0
            && pos(self.gradient_tol)
            && pos(self.param_tol)
            && pos(self.initial_damping)
            && self.damping_up > 1.0
            && pos(self.damping_down)
            && self.damping_down < 1.0
            && self.w_reg >= 0.0
            && [self.ugv_pose_prior, self.uav_pose_prior]
                .iter()
                .flatten()
                .all(|s| pos(s.translation) && pos(s.rotation))
            && self.depth_prior_sigma.is_none_or(pos);
        if ok {
            Ok(())
        } else {
            Err(OptimError::InvalidInput("solver config out of range".into()))
        }
    }
}

/// Inverse of the right Jacobian of SO(3) at `phi`.
pub(crate) fn so3_right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = crate::geometry::skew(phi);
    if theta < 1e-6 {
        return Matrix3::identity() + 0.5 * k + k * k / 12.0;
    }
    let c = 1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() + 0.5 * k + c * k * k
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;

    #[test]
    fn right_jacobian_inverse_matches_finite_differences() {
        let phi = Vector3::new(0.3, -0.2, 0.5);
        let r = UnitQuaternion::from_scaled_axis(phi);
        let jinv = so3_right_jacobian_inv(&phi);
        let h = 1e-6;
        for k in 0..3 {
            let mut d = Vector3::zeros();
            d[k] = h;
            let p = (r * UnitQuaternion::from_scaled_axis(d)).scaled_axis();
            let m = (r * UnitQuaternion::from_scaled_axis(-d)).scaled_axis();
            let col = (p - m) / (2.0 * h);
            assert!((col - jinv.column(k)).norm() < 1e-8);
        }
    }

    #[test]
    fn default_config_is_valid() {
        SolverConfig::default().validate().unwrap();
        let mut c = SolverConfig::default();
        c.damping_up = 0.5;
        assert!(c.validate().is_err());
    }
}
