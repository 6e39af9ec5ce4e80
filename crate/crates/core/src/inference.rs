//! Standard errors and nested-model tests built from the objective at a fitted solution.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::covariance::CovarianceSpec;
use crate::data::GlmmData;
use crate::error::{GlmmError, Result};
use crate::family::{init_state, ExponentialFamily};
use crate::linalg::{null_directions, SpdFactor};
use crate::objective::{PsiEval, Surrogate, WorkingState};
use crate::solver::{predict_random_effects, FitResult, SolverConfig};

/// Full-row-rank `k1 x k2` map from the larger model's coordinates to the smaller model's.
#[derive(Debug, Clone)]
pub struct Restriction {
    b: DMatrix<f64>,
}

impl Restriction {
    pub fn new(b: DMatrix<f64>) -> Result<Self> {
        let (k1, k2) = b.shape();
        if k1 == 0 || k1 >= k2 {
            return Err(GlmmError::invalid(format!(
                "restriction must have fewer rows than columns, got {k1}x{k2}"
            )));
        }
        let sv = b.clone().svd(false, false).singular_values;
        let top = sv.max();
        if !(sv.min() > top * 1e-12 * k2 as f64) {
            return Err(GlmmError::Singular {
                what: "B",
                detail: format!("restriction is rank deficient (singular values {sv:?})"),
            });
        }
        Ok(Self { b })
    }

    /// Headerless comma-separated matrix, one row per line.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| io_error(path, e))?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| io_error(path, e))?;
            let row = rec
                .iter()
                .enumerate()
                .map(|(j, cell)| {
                    cell.parse::<f64>().map_err(|_| GlmmError::Data {
                        row: i + 1,
                        column: format!("{}", j + 1),
                        message: format!("`{cell}` is not a number"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(GlmmError::Data {
                        row: i + 1,
                        column: "*".into(),
                        message: format!("expected {} entries, found {}", first.len(), row.len()),
                    });
                }
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(GlmmError::invalid(format!("{} holds no rows", path.display())));
        }
        let (k1, k2) = (rows.len(), rows[0].len());
        Self::new(DMatrix::from_fn(k1, k2, |i, j| rows[i][j]))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn k1(&self) -> usize {
        self.b.nrows()
    }

    pub fn k2(&self) -> usize {
        self.b.ncols()
    }

    pub fn df(&self) -> usize {
        self.k2() - self.k1()
    }
}

fn io_error(path: &Path, e: csv::Error) -> GlmmError {
    let msg = e.to_string();
    match e.into_kind() {
        csv::ErrorKind::Io(source) => GlmmError::Io {
            path: path.display().to_string(),
            source,
        },
        _ => GlmmError::invalid(format!("{}: {msg}", path.display())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestKind {
    Lr,
    Score,
    Gwald,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub kind: TestKind,
    pub value: f64,
    pub df: usize,
    pub p: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl TestResult {
    fn new(kind: TestKind, value: f64, df: usize) -> Result<Self> {
        let mut warnings = Vec::new();
        let p = if value < 0.0 {
            warnings.push(format!("statistic is negative ({value:.6e}); p-value set to 1"));
            1.0
        } else {
            chisq_sf(value, df as f64)?
        };
        Ok(Self {
            kind,
            value,
            df,
            p,
            warnings,
        })
    }
}

/// `-psi''(0, 0)` at the fitted solution.
pub fn sample_fisher(fit: &FitResult) -> DMatrix<f64> {
    -fit.hess_matrix()
}

/// Square roots of the diagonal of the inverse information.
pub fn std_errors(fisher: &DMatrix<f64>) -> Result<DVector<f64>> {
    match SpdFactor::new(fisher.clone(), "information") {
        Ok(f) => Ok(f.inverse().diagonal().map(f64::sqrt)),
        Err(_) => {
            let dirs = null_directions(fisher, 1e-12);
            let detail = dirs
                .iter()
                .map(|(v, d)| format!("eigenvalue {v:.3e} along {d:.4?}"))
                .collect::<Vec<_>>()
                .join("; ");
            Err(GlmmError::Singular {
                what: "information",
                detail: if detail.is_empty() {
                    "not positive definite".into()
                } else {
                    detail
                },
            })
        }
    }
}

/// Minimum-norm lift `B^+ theta1`, with `B^+ = V S^{-1} U'` from the thin SVD of `B`.
pub fn restriction_embed(r: &Restriction, theta1: &DVector<f64>) -> Result<DVector<f64>> {
    if theta1.len() != r.k1() {
        return Err(GlmmError::invalid(format!(
            "reduced estimate has length {}, restriction expects {}",
            theta1.len(),
            r.k1()
        )));
    }
    let svd = r.b.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let s_inv = svd.singular_values.map(|s| 1.0 / s);
    let pinv = |v: &DVector<f64>| vt.transpose() * (u.transpose() * v).component_mul(&s_inv);
    let lifted = pinv(theta1);
    // one refinement pass; the correction stays in the row space of B
    let residual = theta1 - &r.b * &lifted;
    Ok(lifted + pinv(&residual))
}

/// `2 (psi_full - psi_reduced)` at the two solutions.
pub fn lr_stat(full: &FitResult, reduced: &FitResult, r: &Restriction) -> Result<TestResult> {
    if full.data_digest != reduced.data_digest {
        return Err(GlmmError::invalid("the two fits were computed on different data"));
    }
    if full.theta().len() != r.k2() || reduced.theta().len() != r.k1() {
        return Err(GlmmError::invalid(format!(
            "restriction is {}x{} but the fits have {} and {} estimated coordinates",
            r.k1(),
            r.k2(),
            reduced.theta().len(),
            full.theta().len()
        )));
    }
    let mut t = TestResult::new(TestKind::Lr, 2.0 * (full.psi0 - reduced.psi0), r.df())?;
    for (name, f) in [("full", full), ("reduced", reduced)] {
        if !f.converged {
            t.warnings.push(format!("{name} fit did not converge"));
        }
    }
    Ok(t)
}

/// Objective value, gradient and Hessian at `(0, 0)` around `theta = (beta, free omega)`, with
/// the random effects predicted to convergence there.
pub fn objective_at(
    data: &GlmmData,
    family: &dyn ExponentialFamily,
    cov: &CovarianceSpec,
    theta: &DVector<f64>,
    cfg: &SolverConfig,
) -> Result<PsiEval> {
    let p = data.p();
    if theta.len() != p + cov.n_free() {
        return Err(GlmmError::invalid(format!(
            "parameter vector has length {}, model has {} estimated coordinates",
            theta.len(),
            p + cov.n_free()
        )));
    }
    let beta = theta.rows(0, p).into_owned();
    let free: Vec<f64> = theta.rows(p, cov.n_free()).iter().copied().collect();
    let omega = cov.expand(&free);
    cov.model.validate(&omega)?;
    let pred = predict_random_effects(data, family, cov, &beta, &omega, &init_state(family, data), None, cfg)?;
    let state = WorkingState::new(data, cov, beta, omega, pred.gammahat, pred.work)?;
    let sur = Surrogate::new(data, cov, &state);
    sur.eval(&DVector::zeros(p), &DVector::zeros(cov.n_free()))
}

/// `g' (-H)^{-1} g` at the embedded point.
pub fn score_stat(
    data: &GlmmData,
    family: &dyn ExponentialFamily,
    cov: &CovarianceSpec,
    theta2_star: &DVector<f64>,
    df: usize,
    cfg: &SolverConfig,
) -> Result<(TestResult, PsiEval)> {
    let ev = objective_at(data, family, cov, theta2_star, cfg)?;
    let value = score_from(&ev.grad, &ev.hess)?;
    Ok((TestResult::new(TestKind::Score, value, df)?, ev))
}

/// Score quadratic form from a gradient and Hessian.
pub fn score_from(grad: &DVector<f64>, hess: &DMatrix<f64>) -> Result<f64> {
    let neg = -hess.clone();
    let sol = match SpdFactor::new(neg.clone(), "information") {
        Ok(f) => f.solve_vec(grad),
        Err(_) => neg.lu().solve(grad).ok_or_else(|| GlmmError::Singular {
            what: "Hessian",
            detail: "objective Hessian is singular at the embedded point".into(),
        })?,
    };
    Ok(grad.dot(&sol))
}

/// `-theta' H theta`.
pub fn gw_stat(theta2_star: &DVector<f64>, hess: &DMatrix<f64>, df: usize) -> Result<TestResult> {
    if hess.nrows() != theta2_star.len() || hess.ncols() != theta2_star.len() {
        return Err(GlmmError::invalid("Hessian and parameter dimensions differ"));
    }
    TestResult::new(TestKind::Gwald, -theta2_star.dot(&(hess * theta2_star)), df)
}

/// All three statistics for a nested pair of fits.
pub fn nested_tests(
    data: &GlmmData,
    family: &dyn ExponentialFamily,
    cov_full: &CovarianceSpec,
    full: &FitResult,
    reduced: &FitResult,
    r: &Restriction,
    cfg: &SolverConfig,
) -> Result<Vec<TestResult>> {
    if full.data_digest != data.digest() {
        return Err(GlmmError::invalid("the full fit was computed on different data"));
    }
    let lr = lr_stat(full, reduced, r)?;
    let theta2 = restriction_embed(r, &DVector::from_vec(reduced.theta()))?;
    let (score, ev) = score_stat(data, family, cov_full, &theta2, r.df(), cfg)?;
    let gw = gw_stat(&theta2, &ev.hess, r.df())?;
    Ok(vec![lr, score, gw])
}

const CF_EPS: f64 = 1e-16;
const CF_TINY: f64 = 1e-300;
const MAX_ITER: usize = 10_000;

/// Upper tail `P(X > x)` of the chi-square distribution with `df` degrees of freedom.
pub fn chisq_sf(x: f64, df: f64) -> Result<f64> {
    if !(x >= 0.0) || !x.is_finite() {
        return Err(GlmmError::domain(format!("chi-square argument must be >= 0, got {x}")));
    }
    if !(df > 0.0) || !df.is_finite() {
        return Err(GlmmError::domain(format!("degrees of freedom must be > 0, got {df}")));
    }
    if x == 0.0 {
        return Ok(1.0);
    }
    Ok(gamma_q(0.5 * df, 0.5 * x))
}

/// Regularized upper incomplete gamma `Q(a, x)`.
fn gamma_q(a: f64, x: f64) -> f64 {
    let log_pref = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        // series for P(a, x)
        let mut ap = a;
        let mut del = 1.0 / a;
        let mut sum = del;
        for _ in 0..MAX_ITER {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * CF_EPS {
                break;
            }
        }
        1.0 - sum * log_pref.exp()
    } else {
        // modified Lentz on the continued fraction for Q(a, x)
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / CF_TINY;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..MAX_ITER {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < CF_TINY {
                d = CF_TINY;
            }
            c = b + an / c;
            if c.abs() < CF_TINY {
                c = CF_TINY;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < CF_EPS {
                break;
            }
        }
        log_pref.exp() * h
    }
}
