use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{OptimError, SolverConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub stage: u8,
    pub iteration: usize,
    pub cost: f64,
    pub damping: f64,
    pub gradient_norm: f64,
}

impl TraceRecord {
    /// One JSON object, no trailing newline.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trace record serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    GradientTolerance,
    StepTolerance,
    /// Damping grew past its ceiling without finding a cheaper point.
    NoImprovement,
    IterationCap,
}

#[derive(Clone, Debug)]
pub struct LmOutcome<S> {
    pub state: S,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub trace: Vec<TraceRecord>,
}

impl<S> LmOutcome<S> {
    pub fn converged(&self) -> bool {
        self.termination != Termination::IterationCap
    }

    pub fn ensure_converged(&self) -> Result<(), OptimError> {
        if self.converged() {
            Ok(())
        } else {
            Err(OptimError::NoConvergence {
                iterations: self.iterations,
            })
        }
    }
}

pub(crate) trait LmProblem {
    type State: Clone;
    type System;

    fn cost(&self, s: &Self::State) -> f64;
    /// Gauss-Newton system at `s` and the max-norm of its gradient.
    fn linearize(&self, s: &Self::State) -> (Self::System, f64);
    /// Solves the damped system for the step, `None` when not positive definite.
    fn solve(&self, sys: &Self::System, lambda: f64) -> Option<DVector<f64>>;
    fn retract(&self, s: &Self::State, dx: &DVector<f64>) -> Self::State;
}

const MAX_DAMPING: f64 = 1e16;

pub(crate) fn levenberg_marquardt<P: LmProblem>(
    p: &P,
    init: P::State,
    cfg: &SolverConfig,
    stage: u8,
) -> Result<LmOutcome<P::State>, OptimError> {
    let mut x = init;
    let mut cost = p.cost(&x);
    if !cost.is_finite() {
        return Err(OptimError::InvalidInput("initial cost is not finite".into()));
    }
    let initial_cost = cost;
    let mut lambda = cfg.initial_damping;
    let mut trace = Vec::new();
    let mut termination = Termination::IterationCap;
    let mut iterations = 0;
    'outer: for it in 0..cfg.max_iterations {
        let (sys, grad) = p.linearize(&x);
        trace.push(TraceRecord {
            stage,
            iteration: it,
            cost,
            damping: lambda,
            gradient_norm: grad,
        });
        if grad < cfg.gradient_tol {
            termination = Termination::GradientTolerance;
            break;
        }
        iterations = it + 1;
        let mut solved_once = false;
        loop {
            let Some(dx) = p.solve(&sys, lambda) else {
                lambda *= cfg.damping_up;
                if lambda > MAX_DAMPING {
                    if solved_once {
                        termination = Termination::NoImprovement;
                        break 'outer;
                    }
                    return Err(OptimError::RankDeficient);
                }
                continue;
            };
            solved_once = true;
            if dx.norm() < cfg.param_tol {
                termination = Termination::StepTolerance;
                break 'outer;
            }
            let xn = p.retract(&x, &dx);
            let cn = p.cost(&xn);
            if cn < cost {
                x = xn;
                cost = cn;
                lambda = (lambda * cfg.damping_down).max(1e-15);
                break;
            }
            lambda *= cfg.damping_up;
            if lambda > MAX_DAMPING {
                termination = Termination::NoImprovement;
                break 'outer;
            }
        }
    }
    Ok(LmOutcome {
        state: x,
        initial_cost,
        final_cost: cost,
        iterations,
        termination,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    /// Rosenbrock as least squares: r = (10 (y - x^2), 1 - x).
    struct Rosen;

    impl LmProblem for Rosen {
        type State = [f64; 2];
        type System = (DMatrix<f64>, DVector<f64>);

        fn cost(&self, s: &[f64; 2]) -> f64 {
            let r0 = 10.0 * (s[1] - s[0] * s[0]);
            let r1 = 1.0 - s[0];
            0.5 * (r0 * r0 + r1 * r1)
        }

        fn linearize(&self, s: &[f64; 2]) -> (Self::System, f64) {
            let j = DMatrix::from_row_slice(2, 2, &[-20.0 * s[0], 10.0, -1.0, 0.0]);
            let r = DVector::from_vec(vec![10.0 * (s[1] - s[0] * s[0]), 1.0 - s[0]]);
            let g = j.transpose() * &r;
            let gmax = g.amax();
            ((j.transpose() * j, g), gmax)
        }

        fn solve(&self, (h, g): &Self::System, lambda: f64) -> Option<DVector<f64>> {
            let mut h = h.clone();
            for i in 0..2 {
                h[(i, i)] += lambda * h[(i, i)].max(1e-12);
            }
            h.cholesky().map(|c| c.solve(&(-g)))
        }

        fn retract(&self, s: &[f64; 2], dx: &DVector<f64>) -> [f64; 2] {
            [s[0] + dx[0], s[1] + dx[1]]
        }
    }

    #[test]
    fn solves_rosenbrock_with_monotone_cost() {
        let out = levenberg_marquardt(&Rosen, [-1.2, 1.0], &SolverConfig { max_iterations: 200, ..Default::default() }, 0)
            .unwrap();
        assert!(out.converged());
        assert!((out.state[0] - 1.0).abs() < 1e-6 && (out.state[1] - 1.0).abs() < 1e-6);
        assert!(out.trace.windows(2).all(|w| w[1].cost <= w[0].cost));
        assert!(out.trace[0].to_line().starts_with('{'));
    }
}
