//! Spatial simulation protocol, the Oracle hyperparameter estimator and the RMSE study harness.

use std::fmt::{self, Write as _};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{CovarianceSpec, Geometry};
use crate::data::{distance_matrix, GlmmData};
use crate::error::{GlmmError, Result};
use crate::family::ExponentialFamily;
use crate::linalg::{max_abs, symmetrize, trace_of_product, SpdFactor};
use crate::newton::{maximize, NewtonConfig, Objective};
use crate::registry;
use crate::solver::{multistart_fit, SolverConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Number of sites, one observation and one random effect per site.
    pub n: usize,
    /// Side length of the square the sites are drawn from.
    pub region: f64,
    /// Intercept first; the remaining coefficients multiply standard-normal covariates.
    pub beta_true: Vec<f64>,
    /// Full hyperparameter vector of the generating covariance.
    pub omega_true: Vec<f64>,
    pub covariance: String,
    /// Fixed mask; the model's default when absent.
    pub fixed: Option<Vec<bool>>,
    pub family: String,
    /// Binomial trials per site.
    pub trials: u32,
    pub replications: usize,
    /// Replication `r` draws from a stream seeded with `seed + r`.
    pub seed: u64,
    pub methods: Vec<String>,
    pub solver: SolverConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 100,
            region: 20.0,
            beta_true: vec![2.0, 1.0, 1.0],
            omega_true: vec![0.5, 1.0, 0.5],
            covariance: "matern".into(),
            fixed: None,
            family: "poisson".into(),
            trials: 1,
            replications: 200,
            seed: 20_240_601,
            methods: vec!["proposed".into(), "oracle".into()],
            solver: SolverConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |key: &str, message: String| GlmmError::Config {
            key: key.into(),
            message,
        };
        if self.replications == 0 {
            return Err(cfg("replications", "must be at least 1".into()));
        }
        if self.n < 2 {
            return Err(cfg("n", "need at least 2 sites".into()));
        }
        if !(self.region > 0.0 && self.region.is_finite()) {
            return Err(cfg("region", "must be positive and finite".into()));
        }
        if self.beta_true.is_empty() || self.beta_true.iter().any(|b| !b.is_finite()) {
            return Err(cfg("beta_true", "needs at least an intercept, all finite".into()));
        }
        let family = registry::families()
            .get(&self.family)
            .map_err(|e| cfg("family", e.to_string()))?;
        if family.name() == "binomial" && self.trials == 0 {
            return Err(cfg("trials", "binomial data need at least one trial".into()));
        }
        let model = registry::covariances()
            .get(&self.covariance)
            .map_err(|e| cfg("covariance", e.to_string()))?;
        if self.omega_true.len() != model.param_names().len() {
            return Err(cfg(
                "omega_true",
                format!("{} expects {} values", model.name(), model.param_names().len()),
            ));
        }
        model
            .validate(&self.omega_true)
            .map_err(|e| cfg("omega_true", e.to_string()))?;
        if let Some(mask) = &self.fixed {
            if mask.len() != self.omega_true.len() {
                return Err(cfg("fixed", "length differs from omega_true".into()));
            }
        }
        if self.methods.is_empty() {
            return Err(cfg("methods", "choose at least one method".into()));
        }
        let known = registry::estimators();
        for m in &self.methods {
            known.get(m).map_err(|e| cfg("methods", e.to_string()))?;
        }
        self.solver.validate()
    }

    fn fixed_mask(&self, model_default: Vec<bool>) -> Vec<bool> {
        self.fixed.clone().unwrap_or(model_default)
    }
}

/// `n` independent points uniform on `[0, region]^2`.
pub fn gen_sites(n: usize, region: f64, rng: &mut dyn RngCore) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| [rng.random::<f64>() * region, rng.random::<f64>() * region])
        .collect()
}

/// `gamma = L z` with `D = L L'` and `z` standard normal.
pub fn sample_gp(d: &DMatrix<f64>, rng: &mut dyn RngCore) -> Result<DVector<f64>> {
    let f = SpdFactor::new(d.clone(), "D")?;
    let z = DVector::from_fn(d.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(f.l() * z)
}

/// Conditionally independent responses given the linear predictor.
pub fn gen_response(
    family: &dyn ExponentialFamily,
    eta: &DVector<f64>,
    trials: Option<&DVector<f64>>,
    rng: &mut dyn RngCore,
) -> Result<DVector<f64>> {
    let mut y = DVector::zeros(eta.len());
    for i in 0..eta.len() {
        if !eta[i].is_finite() {
            return Err(GlmmError::domain(format!("non-finite linear predictor at {i}")));
        }
        let m = trials.map_or(1.0, |t| t[i]);
        y[i] = family.sample(eta[i], m, rng)?;
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleFit {
    pub omega: Vec<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    /// False when the iteration ran out of budget or drifted to the domain boundary.
    pub converged: bool,
    pub loglik: f64,
}

struct PriorDensity<'a> {
    gamma: &'a DVector<f64>,
    cov: &'a CovarianceSpec,
}

impl PriorDensity<'_> {
    fn log_phi(&self, omega: &[f64]) -> Result<(f64, SpdFactor)> {
        let (_, f) = self.cov.factor_d_at(omega)?;
        let d = self.gamma.len() as f64;
        let v = -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + f.log_det() + f.quad_form(self.gamma));
        Ok((v, f))
    }
}

impl Objective for PriorDensity<'_> {
    fn value(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.log_phi(&self.cov.expand(x.as_slice()))?.0)
    }

    fn derivatives(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let omega = self.cov.expand(x.as_slice());
        let (value, f) = self.log_phi(&omega)?;
        let a = f.solve_vec(self.gamma);
        let free = self.cov.free_indices();
        let dj: Vec<DMatrix<f64>> = free
            .iter()
            .map(|&j| self.cov.d_domega(&omega, j))
            .collect::<Result<_>>()?;
        let sol: Vec<DMatrix<f64>> = dj.iter().map(|m| f.solve_mat(m)).collect();
        let dja: Vec<DVector<f64>> = dj.iter().map(|m| m * &a).collect();
        let r = free.len();
        let mut g = DVector::zeros(r);
        let mut h = DMatrix::zeros(r, r);
        for k in 0..r {
            g[k] = -0.5 * sol[k].trace() + 0.5 * a.dot(&dja[k]);
            for l in k..r {
                let djk = self.cov.d2_domega2(&omega, free[k], free[l])?;
                let inv_djk = f.solve_mat(&djk);
                h[(k, l)] = -0.5 * inv_djk.trace()
                    + 0.5 * trace_of_product(&sol[k], &sol[l])
                    + 0.5 * a.dot(&(&djk * &a))
                    - dja[k].dot(&f.solve_vec(&dja[l]));
                h[(l, k)] = h[(k, l)];
            }
        }
        symmetrize(&mut h);
        Ok((value, g, h))
    }
}

/// Maximize `log phi(gamma; 0, D_omega)` over the free hyperparameters, starting at `cov.omega`.
pub fn oracle_estimate(gamma: &DVector<f64>, cov: &CovarianceSpec) -> Result<OracleFit> {
    if gamma.len() != cov.dim() {
        return Err(GlmmError::invalid(format!(
            "gamma has length {}, covariance dimension is {}",
            gamma.len(),
            cov.dim()
        )));
    }
    let obj = PriorDensity { gamma, cov };
    let cfg = NewtonConfig {
        step_tol: 1e-12,
        grad_tol: 1e-10,
        max_iter: 100,
        max_halvings: 40,
    };
    let out = maximize(&obj, DVector::from_vec(cov.free_values()), &cfg)?;
    let grad_norm = max_abs(&out.grad);
    // steps that shrink geometrically toward the boundary also satisfy the step test
    let stationary = grad_norm <= 1e-6 * (1.0 + out.value.abs());
    Ok(OracleFit {
        omega: cov.expand(out.x.as_slice()),
        grad_norm,
        iterations: out.iterations,
        converged: out.converged && stationary,
        loglik: out.value,
    })
}

/// One simulated data set together with the quantities only a simulation knows.
#[derive(Debug, Clone)]
pub struct Replication {
    pub index: usize,
    pub data: GlmmData,
    pub gamma: DVector<f64>,
    pub family: Arc<dyn ExponentialFamily>,
    /// Covariance spec at the model's default hyperparameters; fixed entries hold the truth.
    pub cov: CovarianceSpec,
    pub beta_true: Vec<f64>,
    pub omega_true: Vec<f64>,
}

/// Draw replication `index` of the study.
pub fn generate(cfg: &SimConfig, index: usize) -> Result<Replication> {
    let family = registry::families().get(&cfg.family)?;
    let model = registry::covariances().get(&cfg.covariance)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(index as u64));
    let n = cfg.n;
    let sites = gen_sites(n, cfg.region, &mut rng);
    let geometry = Geometry {
        dim: n,
        distances: Some(distance_matrix(&sites)),
    };
    let fixed = cfg.fixed_mask(model.default_fixed());
    let truth = CovarianceSpec::new(
        Arc::clone(&model),
        cfg.omega_true.clone(),
        fixed.clone(),
        geometry.clone(),
        0.0,
    )?;
    let gamma = sample_gp(&truth.build_d()?, &mut rng)?;
    let p = cfg.beta_true.len();
    let mut x = DMatrix::from_element(n, p, 1.0);
    for i in 0..n {
        for j in 1..p {
            x[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let eta = &x * DVector::from_column_slice(&cfg.beta_true) + &gamma;
    let trials = (family.name() == "binomial").then(|| DVector::from_element(n, cfg.trials as f64));
    let y = gen_response(family.as_ref(), &eta, trials.as_ref(), &mut rng)?;
    let data = GlmmData::spatial(y, trials, x, sites)?;
    let start: Vec<f64> = model
        .default_omega()
        .into_iter()
        .zip(&cfg.omega_true)
        .zip(&fixed)
        .map(|((d, t), f)| if *f { *t } else { d })
        .collect();
    let cov = CovarianceSpec::new(model, start, fixed, geometry, 0.0)?;
    Ok(Replication {
        index,
        data,
        gamma,
        family,
        cov,
        beta_true: cfg.beta_true.clone(),
        omega_true: cfg.omega_true.clone(),
    })
}

/// Point estimates of `beta` and the full hyperparameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub beta: Vec<f64>,
    pub omega: Vec<f64>,
}

/// A method compared in the study.
pub trait Estimator: Send + Sync {
    fn name(&self) -> &'static str;

    fn estimate(&self, rep: &Replication, solver: &SolverConfig) -> Result<Estimate>;
}

/// The surrogate fixed-point fit on the observed responses.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProposedEstimator;

impl Estimator for ProposedEstimator {
    fn name(&self) -> &'static str {
        "proposed"
    }

    fn estimate(&self, rep: &Replication, solver: &SolverConfig) -> Result<Estimate> {
        let fit = multistart_fit(&rep.data, rep.family.as_ref(), &rep.cov, solver)?;
        if !fit.converged {
            return Err(GlmmError::NonConvergence {
                what: "fit",
                iterations: fit.iterations,
                last_change: fit.trace.last().map_or(f64::NAN, |t| t.step),
            });
        }
        Ok(Estimate {
            beta: fit.beta,
            omega: fit.omega,
        })
    }
}

/// Sees the true random effects: `beta` is the truth, `omega` maximizes the prior density.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleEstimator;

impl Estimator for OracleEstimator {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn estimate(&self, rep: &Replication, _solver: &SolverConfig) -> Result<Estimate> {
        let fit = oracle_estimate(&rep.gamma, &rep.cov)?;
        if !fit.converged {
            return Err(GlmmError::NonConvergence {
                what: "oracle prior maximization",
                iterations: fit.iterations,
                last_change: fit.grad_norm,
            });
        }
        Ok(Estimate {
            beta: rep.beta_true.clone(),
            omega: fit.omega,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseRow {
    pub method: String,
    pub parameter: String,
    pub rmse: f64,
    pub n_fail: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationLog {
    pub replication: usize,
    pub method: String,
    pub estimates: Option<Vec<f64>>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub methods: Vec<String>,
    /// `beta0..`, then the free hyperparameter names.
    pub parameters: Vec<String>,
    pub truth: Vec<f64>,
    pub rows: Vec<RmseRow>,
    pub log: Vec<ReplicationLog>,
}

impl StudyResult {
    pub fn rmse(&self, method: &str, parameter: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.parameter == parameter)
            .map(|r| r.rmse)
    }

    pub fn failures(&self, method: &str) -> usize {
        self.rows
            .iter()
            .find(|r| r.method == method)
            .map_or(0, |r| r.n_fail)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| GlmmError::invalid(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| GlmmError::invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| GlmmError::invalid(e.to_string()))
    }

    /// Methods as rows, parameters as columns.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<10}", "method");
        for p in &self.parameters {
            let _ = write!(s, "{p:>10}");
        }
        let _ = writeln!(s, "{:>8}", "n_fail");
        for m in &self.methods {
            let _ = write!(s, "{m:<10}");
            for p in &self.parameters {
                let _ = write!(s, "{:>10.4}", self.rmse(m, p).unwrap_or(f64::NAN));
            }
            let _ = writeln!(s, "{:>8}", self.failures(m));
        }
        s
    }
}

impl fmt::Display for StudyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_table())
    }
}

/// Pairwise summation; the split points depend only on the length.
fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        v.iter().sum()
    } else {
        let (a, b) = v.split_at(v.len() / 2);
        pairwise_sum(a) + pairwise_sum(b)
    }
}

pub fn run_study(cfg: &SimConfig) -> Result<StudyResult> {
    cfg.validate()?;
    let reg = registry::estimators();
    let methods: Vec<Arc<dyn Estimator>> = cfg
        .methods
        .iter()
        .map(|m| reg.get(m))
        .collect::<Result<_>>()?;
    run_study_with(cfg, &methods)
}

/// Run the study with explicit estimators; `cfg.methods` is ignored.
pub fn run_study_with(cfg: &SimConfig, methods: &[Arc<dyn Estimator>]) -> Result<StudyResult> {
    if cfg.replications == 0 || methods.is_empty() {
        return Err(GlmmError::invalid("need at least one replication and one method"));
    }
    let model = registry::covariances().get(&cfg.covariance)?;
    let fixed = cfg.fixed_mask(model.default_fixed());
    let free: Vec<usize> = (0..fixed.len()).filter(|j| !fixed[*j]).collect();
    let mut parameters: Vec<String> = (0..cfg.beta_true.len()).map(|j| format!("beta{j}")).collect();
    parameters.extend(free.iter().map(|j| model.param_names()[*j].to_string()));
    let mut truth = cfg.beta_true.clone();
    truth.extend(free.iter().map(|j| cfg.omega_true[*j]));

    let per_rep: Vec<Vec<Result<Vec<f64>>>> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| match generate(cfg, r) {
            Ok(rep) => methods
                .iter()
                .map(|m| {
                    let e = m.estimate(&rep, &cfg.solver)?;
                    let mut theta = e.beta;
                    theta.extend(free.iter().map(|j| e.omega[*j]));
                    if theta.len() != truth.len() {
                        return Err(GlmmError::invalid(format!(
                            "{} returned {} estimates, expected {}",
                            m.name(),
                            theta.len(),
                            truth.len()
                        )));
                    }
                    Ok(theta)
                })
                .collect(),
            Err(e) => {
                let msg = format!("data generation failed: {e}");
                methods.iter().map(|_| Err(GlmmError::invalid(msg.clone()))).collect()
            }
        })
        .collect();

    let mut rows = Vec::new();
    let mut log = Vec::new();
    for (k, m) in methods.iter().enumerate() {
        let ok: Vec<&Vec<f64>> = per_rep.iter().filter_map(|r| r[k].as_ref().ok()).collect();
        let n_fail = cfg.replications - ok.len();
        for (j, name) in parameters.iter().enumerate() {
            let sq: Vec<f64> = ok.iter().map(|t| (t[j] - truth[j]).powi(2)).collect();
            let rmse = if sq.is_empty() {
                f64::NAN
            } else {
                (pairwise_sum(&sq) / sq.len() as f64).sqrt()
            };
            rows.push(RmseRow {
                method: m.name().to_string(),
                parameter: name.clone(),
                rmse,
                n_fail,
            });
        }
    }
    for (r, results) in per_rep.into_iter().enumerate() {
        for (k, res) in results.into_iter().enumerate() {
            let (estimates, error) = match res {
                Ok(t) => (Some(t), None),
                Err(e) => (None, Some(e.to_string())),
            };
            log.push(ReplicationLog {
                replication: r,
                method: methods[k].name().to_string(),
                estimates,
                error,
            });
        }
    }
    Ok(StudyResult {
        methods: methods.iter().map(|m| m.name().to_string()).collect(),
        parameters,
        truth,
        rows,
        log,
    })
}
