//! Damped Newton ascent with step-halving and eigenvalue modification.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{GlmmError, Result};
use crate::linalg::max_abs;

/// A smooth function to be maximized. Errors from `value` mark a point as infeasible.
pub trait Objective {
    fn value(&self, x: &DVector<f64>) -> Result<f64>;

    /// `(value, gradient, Hessian)` at a feasible point.
    fn derivatives(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>)>;
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonConfig {
    /// Stop once an accepted step has max-norm below this.
    pub step_tol: f64,
    /// Stop before stepping when the gradient max-norm is below this.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Maximum halvings per iteration.
    pub max_halvings: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            step_tol: 1e-10,
            grad_tol: 1e-12,
            max_iter: 50,
            max_halvings: 30,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonOutcome {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
    pub iterations: usize,
    /// Total number of step halvings taken.
    pub halvings: usize,
    /// Iterations where the Hessian was not negative definite and was modified.
    pub modified: usize,
    /// False when the iteration budget ran out; `x` is then the last accepted iterate.
    pub converged: bool,
    /// Max-norm of the last accepted step.
    pub last_step: f64,
}

/// Ascent direction `(-H)^+ g`, with `-H` made positive definite by flipping and flooring
/// its eigenvalues. Returns the direction and whether a modification happened.
pub fn ascent_direction(grad: &DVector<f64>, hess: &DMatrix<f64>) -> (DVector<f64>, bool) {
    let eig = SymmetricEigen::new(-hess.clone());
    let top = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let floor = (top * 1e-10).max(1e-300);
    let mut modified = false;
    let lam = eig.eigenvalues.map(|v| {
        if v <= floor {
            modified = true;
            v.abs().max(floor)
        } else {
            v
        }
    });
    let proj = eig.eigenvectors.transpose() * grad;
    let scaled = DVector::from_fn(proj.len(), |i, _| proj[i] / lam[i]);
    (&eig.eigenvectors * scaled, modified)
}

fn no_decrease(new: f64, old: f64) -> bool {
    new >= old - 1e-12 * (1.0 + old.abs())
}

/// Maximize `obj` from `x0`. Trial steps must be feasible and must not decrease the objective.
/// Fails only when no admissible step exists away from a stationary point.
pub fn maximize(obj: &dyn Objective, x0: DVector<f64>, cfg: &NewtonConfig) -> Result<NewtonOutcome> {
    let mut x = x0;
    let mut halvings = 0;
    let mut modified = 0;
    let mut last_step = f64::INFINITY;
    for iter in 0..cfg.max_iter {
        let (value, grad, hess) = obj.derivatives(&x)?;
        let done = |it: usize, h: usize, m: usize, x: DVector<f64>| NewtonOutcome {
            x,
            value,
            grad: grad.clone(),
            hess: hess.clone(),
            iterations: it,
            halvings: h,
            modified: m,
            converged: true,
            last_step,
        };
        if x.is_empty() || max_abs(&grad) < cfg.grad_tol || last_step < cfg.step_tol {
            return Ok(done(iter, halvings, modified, x));
        }
        let (dir, was_modified) = ascent_direction(&grad, &hess);
        if was_modified {
            modified += 1;
        }
        let mut t = 1.0;
        let mut accepted = None;
        for h in 0..=cfg.max_halvings {
            let trial = &x + &dir * t;
            if let Ok(v) = obj.value(&trial) {
                if v.is_finite() && no_decrease(v, value) {
                    halvings += h;
                    accepted = Some(trial);
                    break;
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some(next) => {
                last_step = max_abs(&(&next - &x));
                x = next;
            }
            None => {
                // at a maximum to working precision no ascent step exists; that is convergence
                if max_abs(&dir) < cfg.step_tol {
                    return Ok(done(iter, halvings, modified, x));
                }
                return Err(GlmmError::StepFailure {
                    halvings: cfg.max_halvings,
                });
            }
        }
    }
    let (value, grad, hess) = obj.derivatives(&x)?;
    Ok(NewtonOutcome {
        x,
        value,
        grad,
        hess,
        iterations: cfg.max_iter,
        halvings,
        modified,
        converged: false,
        last_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic;

    impl Objective for Quadratic {
        fn value(&self, x: &DVector<f64>) -> Result<f64> {
            Ok(-(x[0] - 1.0).powi(2) - 3.0 * (x[1] + 2.0).powi(2))
        }
        fn derivatives(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
            let g = DVector::from_vec(vec![-2.0 * (x[0] - 1.0), -6.0 * (x[1] + 2.0)]);
            Ok((self.value(x)?, g, DMatrix::from_diagonal(&DVector::from_vec(vec![-2.0, -6.0]))))
        }
    }

    /// `log x - x` on `x > 0`, maximized at 1.
    struct LogBarrier;

    impl Objective for LogBarrier {
        fn value(&self, x: &DVector<f64>) -> Result<f64> {
            if x[0] <= 0.0 {
                return Err(GlmmError::domain("x must be > 0"));
            }
            Ok(x[0].ln() - x[0])
        }
        fn derivatives(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
            let v = self.value(x)?;
            Ok((
                v,
                DVector::from_element(1, 1.0 / x[0] - 1.0),
                DMatrix::from_element(1, 1, -1.0 / (x[0] * x[0])),
            ))
        }
    }

    #[test]
    fn quadratic_in_one_step() {
        let out = maximize(&Quadratic, DVector::from_vec(vec![5.0, 5.0]), &NewtonConfig::default()).unwrap();
        assert!((out.x[0] - 1.0).abs() < 1e-14 && (out.x[1] + 2.0).abs() < 1e-14);
        assert!(out.iterations <= 2);
    }

    #[test]
    fn halving_keeps_iterates_in_domain() {
        let out = maximize(&LogBarrier, DVector::from_element(1, 6.0), &NewtonConfig::default()).unwrap();
        assert!((out.x[0] - 1.0).abs() < 1e-12);
        assert!(out.halvings > 0);
    }

    #[test]
    fn indefinite_hessian_still_ascends() {
        let g = DVector::from_vec(vec![1.0, -1.0]);
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -2.0]);
        let (dir, modified) = ascent_direction(&g, &h);
        assert!(modified);
        assert!(g.dot(&dir) > 0.0);
    }
}
