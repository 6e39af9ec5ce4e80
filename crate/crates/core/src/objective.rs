//! The Gaussian working-model objective `psi(alpha, delta) = log phi(ytilde; X(beta+alpha), R)`
//! with `R = W^{-1} + Z D_{omega+delta} Z'`, its derivatives, and the factorization identity it
//! rests on.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::covariance::CovarianceSpec;
use crate::data::GlmmData;
use crate::error::{GlmmError, Result};
use crate::family::WorkingVectors;
use crate::linalg::{symmetrize, trace_of_product, SpdFactor};

/// One iterate of the fitting procedure. Immutable once built.
#[derive(Debug, Clone)]
pub struct WorkingState {
    pub beta: DVector<f64>,
    /// Full hyperparameter vector, fixed entries included.
    pub omega: Vec<f64>,
    pub gammahat: DVector<f64>,
    pub work: WorkingVectors,
    pub d: DMatrix<f64>,
    pub r: DMatrix<f64>,
    chol_r: SpdFactor,
}

impl WorkingState {
    pub fn new(
        data: &GlmmData,
        cov: &CovarianceSpec,
        beta: DVector<f64>,
        omega: Vec<f64>,
        gammahat: DVector<f64>,
        work: WorkingVectors,
    ) -> Result<Self> {
        if beta.len() != data.p() || gammahat.len() != data.d() || work.eta.len() != data.n() {
            return Err(GlmmError::invalid("working state dimensions do not match the data"));
        }
        let d = cov.build_d_at(&omega)?;
        let (r, chol_r) = assemble_r(&work, data, &d)?;
        Ok(Self {
            beta,
            omega,
            gammahat,
            work,
            d,
            r,
            chol_r,
        })
    }

    pub fn chol_r(&self) -> &SpdFactor {
        &self.chol_r
    }

    /// `ytilde - X beta`.
    pub fn offset_residual(&self, data: &GlmmData) -> DVector<f64> {
        &self.work.ytilde - &data.x * &self.beta
    }
}

/// `R = W^{-1} + Z D Z'` and its Cholesky factor.
pub fn assemble_r(
    work: &WorkingVectors,
    data: &GlmmData,
    d: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, SpdFactor)> {
    let mut r = data.z_sandwich(d);
    for i in 0..r.nrows() {
        r[(i, i)] += 1.0 / work.w[i];
    }
    let f = SpdFactor::new(r.clone(), "R")?;
    Ok((r, f))
}

/// `psi`, its gradient in `(alpha, delta_free)` and its Hessian.
#[derive(Debug, Clone)]
pub struct PsiEval {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

/// Quantities shared by value and derivative evaluations at one `(alpha, delta)`.
struct Point {
    omega: Vec<f64>,
    chol: SpdFactor,
    e: DVector<f64>,
    u: DVector<f64>,
}

/// The objective around a fixed working state. `delta` ranges over the free hyperparameters only.
#[derive(Debug, Clone, Copy)]
pub struct Surrogate<'a> {
    pub data: &'a GlmmData,
    pub cov: &'a CovarianceSpec,
    pub state: &'a WorkingState,
}

impl<'a> Surrogate<'a> {
    pub fn new(data: &'a GlmmData, cov: &'a CovarianceSpec, state: &'a WorkingState) -> Self {
        Self { data, cov, state }
    }

    pub fn n_alpha(&self) -> usize {
        self.data.p()
    }

    pub fn n_delta(&self) -> usize {
        self.cov.n_free()
    }

    fn check(&self, alpha: &DVector<f64>, delta: &DVector<f64>) -> Result<()> {
        if alpha.len() != self.n_alpha() || delta.len() != self.n_delta() {
            return Err(GlmmError::invalid(format!(
                "expected alpha of length {} and delta of length {}",
                self.n_alpha(),
                self.n_delta()
            )));
        }
        Ok(())
    }

    fn r_at(&self, delta: &DVector<f64>) -> Result<(Vec<f64>, SpdFactor)> {
        let omega = self.cov.shifted(&self.state.omega, delta.as_slice());
        if delta.iter().all(|v| *v == 0.0) {
            return Ok((omega, self.state.chol_r.clone()));
        }
        let d = self.cov.build_d_at(&omega)?;
        let (_, chol) = assemble_r(&self.state.work, self.data, &d)?;
        Ok((omega, chol))
    }

    fn point(&self, alpha: &DVector<f64>, delta: &DVector<f64>) -> Result<Point> {
        self.check(alpha, delta)?;
        let (omega, chol) = self.r_at(delta)?;
        let e = self.state.offset_residual(self.data) - &self.data.x * alpha;
        let u = chol.solve_vec(&e);
        Ok(Point { omega, chol, e, u })
    }

    fn value_at(&self, p: &Point) -> f64 {
        let n = self.data.n() as f64;
        -0.5 * n * (2.0 * PI).ln() - 0.5 * p.chol.log_det() - 0.5 * p.e.dot(&p.u)
    }

    /// `Z (dD/domega_j) Z'` for each free hyperparameter.
    fn r_firsts(&self, omega: &[f64]) -> Result<Vec<DMatrix<f64>>> {
        self.cov
            .free_indices()
            .into_iter()
            .map(|j| Ok(self.data.z_sandwich(&self.cov.d_domega(omega, j)?)))
            .collect()
    }

    pub fn psi(&self, alpha: &DVector<f64>, delta: &DVector<f64>) -> Result<f64> {
        let p = self.point(alpha, delta)?;
        Ok(self.value_at(&p))
    }

    pub fn psi_grad(&self, alpha: &DVector<f64>, delta: &DVector<f64>) -> Result<DVector<f64>> {
        let p = self.point(alpha, delta)?;
        let rj = self.r_firsts(&p.omega)?;
        Ok(self.grad_at(&p, &rj))
    }

    fn grad_at(&self, p: &Point, rj: &[DMatrix<f64>]) -> DVector<f64> {
        let k = self.n_alpha();
        let mut g = DVector::zeros(k + rj.len());
        g.rows_mut(0, k).copy_from(&(self.data.x.transpose() * &p.u));
        for (j, m) in rj.iter().enumerate() {
            let rinv_rj = p.chol.solve_mat(m);
            g[k + j] = -0.5 * rinv_rj.trace() + 0.5 * p.u.dot(&(m * &p.u));
        }
        g
    }

    pub fn psi_hess(&self, alpha: &DVector<f64>, delta: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.eval(alpha, delta)?.hess)
    }

    /// Value, gradient and Hessian sharing one factorization.
    pub fn eval(&self, alpha: &DVector<f64>, delta: &DVector<f64>) -> Result<PsiEval> {
        let p = self.point(alpha, delta)?;
        let free = self.cov.free_indices();
        let rj = self.r_firsts(&p.omega)?;
        let k = self.n_alpha();
        let q = rj.len();
        let x = &self.data.x;
        let rinv_x = p.chol.solve_mat(x);
        let rinv_rj: Vec<DMatrix<f64>> = rj.iter().map(|m| p.chol.solve_mat(m)).collect();
        let rj_u: Vec<DVector<f64>> = rj.iter().map(|m| m * &p.u).collect();
        let rinv_rj_u: Vec<DVector<f64>> = rj_u.iter().map(|v| p.chol.solve_vec(v)).collect();

        let mut grad = DVector::zeros(k + q);
        grad.rows_mut(0, k).copy_from(&(x.transpose() * &p.u));
        for j in 0..q {
            grad[k + j] = -0.5 * rinv_rj[j].trace() + 0.5 * p.u.dot(&rj_u[j]);
        }

        let mut hess = DMatrix::zeros(k + q, k + q);
        hess.view_mut((0, 0), (k, k)).copy_from(&(-(x.transpose() * &rinv_x)));
        for j in 0..q {
            let col = -(rinv_x.transpose() * &rj_u[j]);
            hess.view_mut((0, k + j), (k, 1)).copy_from(&col);
            hess.view_mut((k + j, 0), (1, k)).copy_from(&col.transpose());
        }
        for a in 0..q {
            for b in a..q {
                let rab = self
                    .data
                    .z_sandwich(&self.cov.d2_domega2(&p.omega, free[a], free[b])?);
                let rinv_rab = p.chol.solve_mat(&rab);
                let h = -0.5 * rinv_rab.trace()
                    + 0.5 * trace_of_product(&rinv_rj[a], &rinv_rj[b])
                    + 0.5 * p.u.dot(&(&rab * &p.u))
                    - rj_u[a].dot(&rinv_rj_u[b]);
                hess[(k + a, k + b)] = h;
                hess[(k + b, k + a)] = h;
            }
        }
        symmetrize(&mut hess);
        Ok(PsiEval {
            value: self.value_at(&p),
            grad,
            hess,
        })
    }

    /// Maximizer of `psi(., delta)`: `(X'R^{-1}X)^{-1} X'R^{-1}(ytilde - X beta)`.
    pub fn profile_alpha(&self, delta: &DVector<f64>) -> Result<DVector<f64>> {
        if delta.len() != self.n_delta() {
            return Err(GlmmError::invalid("delta length does not match the free hyperparameters"));
        }
        let (_, chol) = self.r_at(delta)?;
        let x = &self.data.x;
        let xtrx = x.transpose() * chol.solve_mat(x);
        let rhs = x.transpose() * chol.solve_vec(&self.state.offset_residual(self.data));
        let f = SpdFactor::new(xtrx, "X'R^-1 X")?;
        Ok(f.solve_vec(&rhs))
    }

    /// Working-model posterior mean `v = D Z' R^{-1} (ytilde - X beta - X alpha)` and covariance
    /// `V = D - D Z' R^{-1} Z D`, with `D` at `omega + delta`.
    pub fn posterior_moments(
        &self,
        alpha: &DVector<f64>,
        delta: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let p = self.point(alpha, delta)?;
        let d = self.cov.build_d_at(&p.omega)?;
        let dzt = &d * self.data.z.transpose();
        let v = &dzt * &p.u;
        let vmat = &d - &dzt * p.chol.solve_mat(&dzt.transpose());
        Ok((v, vmat))
    }
}

/// Inputs of the factorization identity
/// `phi(ytilde; X(beta+alpha) + Z gamma, W^{-1}) phi(gamma; 0, D) = phi(gamma; v, V) phi(ytilde; X(beta+alpha), R)`.
#[derive(Debug, Clone)]
pub struct IdentityConfig {
    pub ytilde: DVector<f64>,
    pub w: DVector<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub beta: DVector<f64>,
    pub alpha: DVector<f64>,
    pub gamma: DVector<f64>,
}

/// Residuals of the factorization identity and of its term-by-term decomposition.
#[derive(Debug, Clone, Copy)]
pub struct IdentityResiduals {
    /// `|log lhs - log rhs| / max(1, |log lhs|)`.
    pub log_identity: f64,
    /// `|T_k - T~_k| / max(1, |T_k|)` for the log-determinant, residual quadratic, cross and
    /// random-effect quadratic terms.
    pub terms: [f64; 4],
    /// Relative gap in `det(D) det(W^{-1}) = det(V) det(R)`.
    pub determinant: f64,
}

impl IdentityResiduals {
    pub fn max(&self) -> f64 {
        self.terms
            .iter()
            .fold(self.log_identity.max(self.determinant), |a, v| a.max(*v))
    }
}

fn log_mvn(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let f = SpdFactor::new(cov.clone(), "covariance")?;
    let r = x - mean;
    Ok(-0.5 * (x.len() as f64) * (2.0 * PI).ln() - 0.5 * f.log_det() - 0.5 * f.quad_form(&r))
}

/// Evaluate both sides of the factorization identity independently, and each paired term.
pub fn factorization_residual(c: &IdentityConfig) -> Result<IdentityResiduals> {
    let n = c.ytilde.len();
    let winv = DMatrix::from_diagonal(&c.w.map(|v| 1.0 / v));
    let wm = DMatrix::from_diagonal(&c.w);
    let mean = &c.x * (&c.beta + &c.alpha);
    let e = &c.ytilde - &mean;
    let r = &winv + &c.z * &c.d * c.z.transpose();
    let rf = SpdFactor::new(r.clone(), "R")?;
    let rinv = rf.inverse();
    let dzt = &c.d * c.z.transpose();
    let vmat = &c.d - &dzt * &rinv * dzt.transpose();
    let vf = SpdFactor::new(vmat.clone(), "V")?;
    let vinv = vf.inverse();
    let v = &dzt * &rinv * &e;
    let df = SpdFactor::new(c.d.clone(), "D")?;

    let lhs = log_mvn(&c.ytilde, &(&mean + &c.z * &c.gamma), &winv)?
        + log_mvn(&c.gamma, &DVector::zeros(c.gamma.len()), &c.d)?;
    let rhs = log_mvn(&c.gamma, &v, &vmat)? + log_mvn(&c.ytilde, &mean, &r)?;

    let logdet_winv: f64 = c.w.iter().map(|v| -v.ln()).sum();
    let t1 = -0.5 * (logdet_winv + df.log_det());
    let t1t = -0.5 * (rf.log_det() + vf.log_det());
    let t2 = -0.5 * e.dot(&(&wm * &e));
    let inner = &rinv + &rinv * &dzt.transpose() * &vinv * &dzt * &rinv;
    let t2t = -0.5 * e.dot(&(&inner * &e));
    let t3 = c.gamma.dot(&(c.z.transpose() * &wm * &e));
    let t3t = c.gamma.dot(&(&vinv * &dzt * &rinv * &e));
    let t4 = -0.5 * c.gamma.dot(&((df.inverse() + c.z.transpose() * &wm * &c.z) * &c.gamma));
    let t4t = -0.5 * c.gamma.dot(&(&vinv * &c.gamma));
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(1.0);

    let det_lhs = df.log_det() + logdet_winv;
    let det_rhs = vf.log_det() + rf.log_det();
    debug_assert_eq!(n, r.nrows());
    Ok(IdentityResiduals {
        log_identity: (lhs - rhs).abs() / lhs.abs().max(1.0),
        terms: [rel(t1, t1t), rel(t2, t2t), rel(t3, t3t), rel(t4, t4t)],
        determinant: (det_lhs - det_rhs).exp_m1().abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{Geometry, ScaledIdentity};
    use crate::family::{working_response, PoissonLog};
    use std::sync::Arc;

    fn scalar_setup(y: f64, w1: f64) -> (GlmmData, CovarianceSpec) {
        let data = GlmmData::new(
            DVector::from_element(1, y),
            None,
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            None,
        )
        .unwrap();
        let cov = CovarianceSpec::new(
            Arc::new(ScaledIdentity),
            vec![w1],
            vec![false],
            Geometry { dim: 1, distances: None },
            0.0,
        )
        .unwrap();
        (data, cov)
    }

    fn manual_state(data: &GlmmData, cov: &CovarianceSpec, ytilde: f64, w: f64) -> WorkingState {
        let work = WorkingVectors {
            eta: DVector::zeros(1),
            ytilde: DVector::from_element(1, ytilde),
            w: DVector::from_element(1, w),
            clamped: vec![],
        };
        WorkingState::new(data, cov, DVector::zeros(1), cov.omega.clone(), DVector::zeros(1), work).unwrap()
    }

    #[test]
    fn assemble_r_examples() {
        let (data, cov) = scalar_setup(1.0, 1.0);
        let s = manual_state(&data, &cov, 0.0, 1.0);
        assert_eq!(s.r[(0, 0)], 2.0);

        let data2 = GlmmData::new(
            DVector::from_vec(vec![1.0, 2.0]),
            None,
            DMatrix::from_element(2, 1, 1.0),
            DMatrix::identity(2, 2),
            None,
        )
        .unwrap();
        let work = WorkingVectors {
            eta: DVector::zeros(2),
            ytilde: DVector::zeros(2),
            w: DVector::from_vec(vec![2.0, 4.0]),
            clamped: vec![],
        };
        let (r, _) = assemble_r(&work, &data2, &DMatrix::identity(2, 2)).unwrap();
        assert_eq!(r, DMatrix::from_diagonal(&DVector::from_vec(vec![1.5, 1.25])));
    }

    #[test]
    fn centered_scalar_value_and_curvature() {
        let (data, cov) = scalar_setup(1.0, 1.0);
        let s = manual_state(&data, &cov, 0.0, 1.0);
        let sur = Surrogate::new(&data, &cov, &s);
        let z = DVector::zeros(1);
        let v = sur.psi(&z, &z).unwrap();
        assert!((v + 0.5 * (4.0 * PI).ln()).abs() < 1e-14);
        assert!((v + 1.265_512).abs() < 1e-6);
        let h = sur.psi_hess(&z, &z).unwrap();
        assert!((h[(0, 0)] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn scalar_scaled_identity_derivatives_by_hand() {
        // R = 1/w + omega; e = ytilde; psi = -1/2 log(2 pi R) - e^2 / (2R)
        let (data, cov) = scalar_setup(1.0, 0.7);
        let (yt, w) = (0.9, 2.5);
        let s = manual_state(&data, &cov, yt, w);
        let sur = Surrogate::new(&data, &cov, &s);
        let z = DVector::zeros(1);
        let r = 1.0 / w + 0.7;
        let ev = sur.eval(&z, &z).unwrap();
        assert!((ev.grad[0] - yt / r).abs() < 1e-14);
        assert!((ev.grad[1] - (-0.5 / r + 0.5 * yt * yt / (r * r))).abs() < 1e-14);
        assert!((ev.hess[(1, 1)] - (0.5 / (r * r) - yt * yt / (r * r * r))).abs() < 1e-14);
        assert!((ev.hess[(0, 1)] + yt / (r * r)).abs() < 1e-14);
    }

    #[test]
    fn profiled_alpha_zeroes_alpha_gradient() {
        let (data, cov) = scalar_setup(3.0, 0.7);
        let state_work = working_response(&PoissonLog, &data, &DVector::from_element(1, 0.3));
        let s = WorkingState::new(&data, &cov, DVector::zeros(1), vec![0.7], DVector::zeros(1), state_work)
            .unwrap();
        let sur = Surrogate::new(&data, &cov, &s);
        let delta = DVector::from_element(1, 0.2);
        let a = sur.profile_alpha(&delta).unwrap();
        assert!(sur.psi_grad(&a, &delta).unwrap()[0].abs() < 1e-13);
    }

    #[test]
    fn tiny_prior_variance_shrinks_posterior_mean() {
        let (data, cov) = scalar_setup(5.0, 1e-8);
        let s = manual_state(&data, &cov, 2.0, 1.0);
        let sur = Surrogate::new(&data, &cov, &s);
        let (v, _) = sur.posterior_moments(&DVector::zeros(1), &DVector::zeros(1)).unwrap();
        assert!(v[0].abs() < 1e-7);
    }

    #[test]
    fn out_of_domain_delta_is_reported() {
        let (data, cov) = scalar_setup(1.0, 0.5);
        let s = manual_state(&data, &cov, 0.0, 1.0);
        let sur = Surrogate::new(&data, &cov, &s);
        let err = sur.psi(&DVector::zeros(1), &DVector::from_element(1, -1.0)).unwrap_err();
        assert!(matches!(err, GlmmError::Domain(_)));
    }
}
