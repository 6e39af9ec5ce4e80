//! Brute-force marginal likelihood and score by adaptive Gauss-Hermite quadrature over the
//! random effects. Feasible only for a handful of random effects; used to certify fits.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariance::CovarianceSpec;
use crate::data::GlmmData;
use crate::error::{GlmmError, Result};
use crate::family::{eval_b, loglik_conditional, ExponentialFamily};
use crate::linalg::{log_sum_exp, max_abs, SpdFactor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Centering {
    /// Nodes placed by the prior `N(0, D)`.
    Prior,
    /// Nodes shifted to the joint mode and scaled by the inverse curvature there.
    Mode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    pub nodes_per_dim: usize,
    pub centering: Centering,
    /// Upper bound on the total node count `nodes_per_dim^d`.
    pub budget: u128,
    /// Recompute with twice the nodes and warn if the log-likelihood moves by more than 1e-6.
    pub check_doubling: bool,
}

impl Default for QuadratureRule {
    fn default() -> Self {
        Self {
            nodes_per_dim: 40,
            centering: Centering::Mode,
            budget: 20_000_000,
            check_doubling: false,
        }
    }
}

impl QuadratureRule {
    pub fn with_nodes(nodes_per_dim: usize) -> Self {
        Self {
            nodes_per_dim,
            ..Self::default()
        }
    }

    fn check(&self, d: usize) -> Result<()> {
        if self.nodes_per_dim < 5 {
            return Err(GlmmError::invalid("quadrature needs at least 5 nodes per dimension"));
        }
        let total = (self.nodes_per_dim as u128).checked_pow(d as u32).unwrap_or(u128::MAX);
        if total > self.budget {
            return Err(GlmmError::Budget {
                nodes: total,
                budget: self.budget,
            });
        }
        Ok(())
    }
}

/// Gauss-Hermite nodes and weights for the weight `exp(-x^2)`, nodes ascending.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let pim4 = PI.powf(-0.25);
    let nf = n as f64;
    let mut z = 0.0;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            // orthonormal Hermite recurrence
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    x.reverse();
    w.reverse();
    (x, w)
}

/// Marginal log-likelihood and score at one parameter point.
#[derive(Debug, Clone)]
pub struct OracleEval {
    pub loglik: f64,
    /// `(d/dbeta, d/domega_free)`.
    pub score: DVector<f64>,
    pub warnings: Vec<String>,
}

struct Integrand<'a> {
    data: &'a GlmmData,
    family: &'a dyn ExponentialFamily,
    xb: DVector<f64>,
    dchol: SpdFactor,
    dinv: DMatrix<f64>,
}

impl Integrand<'_> {
    fn log_joint(&self, g: &DVector<f64>) -> f64 {
        let eta = &self.xb + self.data.z_mul(g);
        let d = g.len() as f64;
        loglik_conditional(self.family, self.data, &eta)
            - 0.5 * d * (2.0 * PI).ln()
            - 0.5 * self.dchol.log_det()
            - 0.5 * self.dchol.quad_form(g)
    }

    /// Joint mode by Newton with step-halving, and the negative Hessian there.
    fn mode(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let d = self.data.d();
        let mut g = DVector::zeros(d);
        let mut cur = self.log_joint(&g);
        for _ in 0..500 {
            let eta = &self.xb + self.data.z_mul(&g);
            let (_, b1, b2) = eval_b(self.family, self.data.trials.as_ref(), &eta);
            let grad = self.data.z.transpose() * (&self.data.y - b1) - &self.dinv * &g;
            let neg_h = self.data.z.transpose() * DMatrix::from_diagonal(&b2) * &self.data.z + &self.dinv;
            let f = SpdFactor::new(neg_h.clone(), "negative joint Hessian")?;
            let step = f.solve_vec(&grad);
            if max_abs(&step) < 1e-13 * (1.0 + max_abs(&g)) {
                return Ok((g, neg_h));
            }
            let mut t = 1.0;
            loop {
                let cand = &g + &step * t;
                let v = self.log_joint(&cand);
                if v.is_finite() && v >= cur - 1e-14 * (1.0 + cur.abs()) {
                    g = cand;
                    cur = v;
                    break;
                }
                t *= 0.5;
                if t < 1e-12 {
                    return Ok((g, neg_h));
                }
            }
        }
        Err(GlmmError::NonConvergence {
            what: "oracle mode search",
            iterations: 500,
            last_change: f64::NAN,
        })
    }
}

/// Node locations and log-weights of the product rule, centred and scaled.
fn nodes(
    n: usize,
    center: &DVector<f64>,
    l: &DMatrix<f64>,
) -> (Vec<DVector<f64>>, Vec<f64>) {
    let d = center.len();
    let (x, w) = gauss_hermite(n);
    let log_jac = 0.5 * d as f64 * 2f64.ln() + l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let total = n.pow(d as u32);
    let mut pts = Vec::with_capacity(total);
    let mut logw = Vec::with_capacity(total);
    let mut idx = vec![0usize; d];
    for _ in 0..total {
        let z = DVector::from_fn(d, |k, _| x[idx[k]]);
        let lw: f64 = idx.iter().map(|&i| w[i].ln() + x[i] * x[i]).sum::<f64>() + log_jac;
        pts.push(center + l * &z * 2f64.sqrt());
        logw.push(lw);
        for k in (0..d).rev() {
            idx[k] += 1;
            if idx[k] < n {
                break;
            }
            idx[k] = 0;
        }
    }
    (pts, logw)
}

fn evaluate_with(
    data: &GlmmData,
    family: &dyn ExponentialFamily,
    cov: &CovarianceSpec,
    beta: &DVector<f64>,
    omega: &[f64],
    rule: &QuadratureRule,
    with_score: bool,
) -> Result<OracleEval> {
    rule.check(data.d())?;
    if beta.len() != data.p() {
        return Err(GlmmError::invalid("beta length does not match the design"));
    }
    let (_, dchol) = cov.factor_d_at(omega)?;
    let integrand = Integrand {
        data,
        family,
        xb: &data.x * beta,
        dinv: dchol.inverse(),
        dchol,
    };
    let (center, l) = match rule.centering {
        Centering::Prior => (DVector::zeros(data.d()), integrand.dchol.l()),
        Centering::Mode => {
            let (m, neg_h) = integrand.mode()?;
            let cov_post = SpdFactor::new(neg_h, "negative joint Hessian")?.inverse();
            (m, SpdFactor::new(cov_post, "posterior scale")?.l())
        }
    };
    let (pts, logw) = nodes(rule.nodes_per_dim, &center, &l);
    let logs: Vec<f64> = pts
        .iter()
        .zip(&logw)
        .map(|(g, lw)| lw + integrand.log_joint(g))
        .collect();
    let loglik = log_sum_exp(&logs);
    let mut warnings = Vec::new();
    if !loglik.is_finite() {
        return Err(GlmmError::Singular {
            what: "marginal likelihood",
            detail: "quadrature sum is not finite".into(),
        });
    }

    let free = cov.free_indices();
    let mut score = DVector::zeros(data.p() + free.len());
    if with_score {
        let dj: Vec<DMatrix<f64>> = free
            .iter()
            .map(|j| cov.d_domega(omega, *j))
            .collect::<Result<_>>()?;
        let tr: Vec<f64> = dj.iter().map(|m| (&integrand.dinv * m).trace()).collect();
        let sand: Vec<DMatrix<f64>> = dj.iter().map(|m| &integrand.dinv * m * &integrand.dinv).collect();
        for (g, lv) in pts.iter().zip(&logs) {
            let q = (lv - loglik).exp();
            if q == 0.0 {
                continue;
            }
            let eta = &integrand.xb + data.z_mul(g);
            let (_, b1, _) = eval_b(family, data.trials.as_ref(), &eta);
            let sb = data.x.transpose() * (&data.y - b1);
            for k in 0..data.p() {
                score[k] += q * sb[k];
            }
            for (j, s) in sand.iter().enumerate() {
                score[data.p() + j] += q * (-0.5 * tr[j] + 0.5 * g.dot(&(s * g)));
            }
        }
    }

    if rule.check_doubling {
        let twice = QuadratureRule {
            nodes_per_dim: rule.nodes_per_dim * 2,
            check_doubling: false,
            ..*rule
        };
        let again = evaluate_with(data, family, cov, beta, omega, &twice, false)?;
        let gap = (again.loglik - loglik).abs();
        if gap > 1e-6 {
            warnings.push(format!(
                "quadrature not converged: doubling nodes moves the log-likelihood by {gap:.3e}"
            ));
        }
    }
    Ok(OracleEval {
        loglik,
        score,
        warnings,
    })
}

/// `log integral f(y | gamma) phi(gamma; 0, D_omega) dgamma`.
pub fn marginal_loglik(
    data: &GlmmData,
    family: &dyn ExponentialFamily,
    cov: &CovarianceSpec,
    beta: &DVector<f64>,
    omega: &[f64],
    rule: &QuadratureRule,
) -> Result<OracleEval> {
    evaluate_with(data, family, cov, beta, omega, rule, false)
}

/// Marginal log-likelihood with its gradient in `(beta, free omega)`, both from one node set.
pub fn marginal_score(
    data: &GlmmData,
    family: &dyn ExponentialFamily,
    cov: &CovarianceSpec,
    beta: &DVector<f64>,
    omega: &[f64],
    rule: &QuadratureRule,
) -> Result<OracleEval> {
    evaluate_with(data, family, cov, beta, omega, rule, true)
}

/// Axes of a product grid over `(beta, free omega)`.
#[derive(Debug, Clone)]
pub struct ParamGrid {
    pub axes: Vec<Vec<f64>>,
}

impl ParamGrid {
    pub fn len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Evenly spaced axes of `points` values centred on `center` with half-widths `radius`.
    pub fn around(center: &[f64], radius: &[f64], points: usize) -> Self {
        let axes = center
            .iter()
            .zip(radius)
            .map(|(c, r)| {
                (0..points)
                    .map(|i| c - r + 2.0 * r * i as f64 / (points - 1).max(1) as f64)
                    .collect()
            })
            .collect();
        Self { axes }
    }
}

/// Grid point with the largest marginal log-likelihood; out-of-domain points are skipped.
pub fn grid_argmax(
    data: &GlmmData,
    family: &dyn ExponentialFamily,
    cov: &CovarianceSpec,
    grid: &ParamGrid,
    rule: &QuadratureRule,
) -> Result<(Vec<f64>, f64)> {
    let p = data.p();
    if grid.axes.len() != p + cov.n_free() {
        return Err(GlmmError::invalid("grid dimension differs from the number of estimated coordinates"));
    }
    let total = grid.len();
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut idx = vec![0usize; grid.axes.len()];
    for _ in 0..total {
        let theta: Vec<f64> = idx.iter().enumerate().map(|(k, i)| grid.axes[k][*i]).collect();
        let omega = cov.expand(&theta[p..]);
        if cov.model.validate(&omega).is_ok() {
            let beta = DVector::from_column_slice(&theta[..p]);
            if let Ok(ev) = marginal_loglik(data, family, cov, &beta, &omega, rule) {
                if best.as_ref().is_none_or(|(_, v)| ev.loglik > *v) {
                    best = Some((theta, ev.loglik));
                }
            }
        }
        for k in (0..idx.len()).rev() {
            idx[k] += 1;
            if idx[k] < grid.axes[k].len() {
                break;
            }
            idx[k] = 0;
        }
    }
    best.ok_or_else(|| GlmmError::invalid("no grid point is inside the hyperparameter domain"))
}
