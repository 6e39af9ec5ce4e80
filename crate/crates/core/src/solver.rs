//! The prediction-maximization iteration: predict the random effects, maximize the working-model
//! objective in `(alpha, delta)`, update `(beta, omega)`, and repeat until the update vanishes.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::CovarianceSpec;
use crate::data::GlmmData;
use crate::error::{GlmmError, Result};
use crate::family::{init_state, loglik_conditional, working_response, ExponentialFamily, WorkingVectors};
use crate::inference::std_errors;
use crate::linalg::max_abs;
use crate::newton::{maximize, NewtonConfig, Objective};
use crate::objective::{assemble_r, PsiEval, Surrogate, WorkingState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Outer convergence: max-norm of the last `(alpha, delta)` update.
    pub outer_tol: f64,
    /// Outer convergence: max-norm of the objective gradient at `(0, 0)`.
    pub grad_tol: f64,
    /// Random-effect prediction: max-norm change of `gammahat`; also the inner Newton step tolerance.
    pub inner_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub max_newton: usize,
    /// Step halvings allowed per Newton iteration.
    pub damping: usize,
    /// Starting hyperparameters; the covariance spec's values when absent.
    pub omega_init: Option<Vec<f64>>,
    /// Full hyperparameter vectors for multi-start fitting.
    pub starts: Vec<Vec<f64>>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            outer_tol: 1e-10,
            grad_tol: 1e-8,
            inner_tol: 1e-12,
            max_outer: 100,
            max_inner: 200,
            max_newton: 50,
            damping: 30,
            omega_init: None,
            starts: Vec::new(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("outer_tol", self.outer_tol),
            ("grad_tol", self.grad_tol),
            ("inner_tol", self.inner_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(GlmmError::Config {
                    key: format!("solver.{name}"),
                    message: "must be positive".into(),
                });
            }
        }
        for (name, v) in [
            ("max_outer", self.max_outer),
            ("max_inner", self.max_inner),
            ("max_newton", self.max_newton),
            ("damping", self.damping),
        ] {
            if v == 0 {
                return Err(GlmmError::Config {
                    key: format!("solver.{name}"),
                    message: "must be at least 1".into(),
                });
            }
        }
        Ok(())
    }

    fn newton(&self) -> NewtonConfig {
        NewtonConfig {
            step_tol: self.inner_tol,
            grad_tol: 0.0,
            max_iter: self.max_newton,
            max_halvings: self.damping,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub beta: Vec<f64>,
    pub omega: Vec<f64>,
    /// Objective at `(0, 0)` around this iterate.
    pub psi: f64,
    /// Max-norm of the update taken from this iterate.
    pub step: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub family: String,
    pub covariance: String,
    pub beta: Vec<f64>,
    /// Full hyperparameter vector.
    pub omega: Vec<f64>,
    pub omega_fixed: Vec<bool>,
    /// Names of the estimated coordinates, `beta` first, then free hyperparameters.
    pub names: Vec<String>,
    pub gammahat: Vec<f64>,
    pub psi0: f64,
    pub grad: Vec<f64>,
    pub grad_norm: f64,
    pub hess: Vec<Vec<f64>>,
    pub se: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<TraceEntry>,
    pub warnings: Vec<String>,
    pub data_digest: String,
}

impl FitResult {
    /// Estimated coordinates `(beta, free omega)`.
    pub fn theta(&self) -> Vec<f64> {
        let mut t = self.beta.clone();
        t.extend(
            self.omega
                .iter()
                .zip(&self.omega_fixed)
                .filter(|(_, f)| !**f)
                .map(|(v, _)| *v),
        );
        t
    }

    pub fn hess_matrix(&self) -> DMatrix<f64> {
        let k = self.hess.len();
        DMatrix::from_fn(k, k, |i, j| self.hess[i][j])
    }
}

/// Random-effect prediction at fixed `(beta, omega)`.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub gammahat: DVector<f64>,
    pub work: WorkingVectors,
    pub iterations: usize,
}

/// Iterate `gammahat <- D Z' R^{-1} (ytilde - X beta)` with `ytilde`, `W` refreshed at
/// `X beta + Z gammahat`, starting from `start_work`. Each update is a Newton step on
/// `log f(y | gamma) - gamma' D^{-1} gamma / 2` and is halved if that decreases.
#[allow(clippy::too_many_arguments)]
pub fn predict_random_effects(
    data: &GlmmData,
    family: &dyn ExponentialFamily,
    cov: &CovarianceSpec,
    beta: &DVector<f64>,
    omega: &[f64],
    start_work: &WorkingVectors,
    start_gamma: Option<&DVector<f64>>,
    cfg: &SolverConfig,
) -> Result<Prediction> {
    let (d, dchol) = cov.factor_d_at(omega)?;
    let xb = &data.x * beta;
    let dzt = &d * data.z.transpose();
    let penalized = |g: &DVector<f64>| {
        let eta = &xb + data.z_mul(g);
        loglik_conditional(family, data, &eta) - 0.5 * dchol.quad_form(g)
    };
    let mut work = start_work.clone();
    let mut gamma = start_gamma.cloned();
    let mut change = f64::INFINITY;
    for it in 1..=cfg.max_inner {
        let (_, rchol) = assemble_r(&work, data, &d)?;
        let target = &dzt * rchol.solve_vec(&(&work.ytilde - &xb));
        let next = match &gamma {
            None => target,
            Some(g) => {
                let dir = &target - g;
                let q0 = penalized(g);
                let mut t = 1.0;
                let mut accepted = None;
                for _ in 0..=cfg.damping {
                    let cand = g + &dir * t;
                    let q = penalized(&cand);
                    if q.is_finite() && q >= q0 - 1e-12 * (1.0 + q0.abs()) {
                        accepted = Some(cand);
                        break;
                    }
                    t *= 0.5;
                }
                match accepted {
                    Some(c) => c,
                    None if max_abs(&dir) < cfg.inner_tol => g.clone(),
                    None => return Err(GlmmError::StepFailure { halvings: cfg.damping }),
                }
            }
        };
        change = gamma.as_ref().map_or(f64::INFINITY, |g| max_abs(&(&next - g)));
        work = working_response(family, data, &(&xb + data.z_mul(&next)));
        gamma = Some(next);
        if change < cfg.inner_tol {
            return Ok(Prediction {
                gammahat: gamma.unwrap(),
                work,
                iterations: it,
            });
        }
    }
    Err(GlmmError::NonConvergence {
        what: "random-effect prediction",
        iterations: cfg.max_inner,
        last_change: change,
    })
}

/// Maximizer of the objective over `(alpha, delta)` around one working state.
#[derive(Debug, Clone)]
pub struct InnerSolution {
    pub alpha: DVector<f64>,
    pub delta: DVector<f64>,
    pub psi: f64,
    pub iterations: usize,
    pub halvings: usize,
    pub modified: usize,
}

/// The objective with `alpha` maximized out; its Hessian is the Schur complement.
struct Profiled<'a> {
    sur: Surrogate<'a>,
}

impl Profiled<'_> {
    fn schur(ev: &PsiEval, p: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let k = ev.grad.len();
        let q = k - p;
        let haa = ev.hess.view((0, 0), (p, p)).into_owned();
        let had = ev.hess.view((0, p), (p, q)).into_owned();
        let hdd = ev.hess.view((p, p), (q, q)).into_owned();
        let neg = crate::linalg::SpdFactor::new(-haa, "X'R^-1 X")?;
        // H_dd - H_da H_aa^{-1} H_ad with H_aa = -neg
        let h = hdd + had.transpose() * neg.solve_mat(&had);
        Ok((ev.grad.rows(p, q).into_owned(), h))
    }
}

impl Objective for Profiled<'_> {
    fn value(&self, delta: &DVector<f64>) -> Result<f64> {
        let a = self.sur.profile_alpha(delta)?;
        self.sur.psi(&a, delta)
    }

    fn derivatives(&self, delta: &DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let a = self.sur.profile_alpha(delta)?;
        let ev = self.sur.eval(&a, delta)?;
        let (g, h) = Self::schur(&ev, self.sur.n_alpha())?;
        Ok((ev.value, g, h))
    }
}

/// Solve the stationarity equations of the objective: `alpha` in closed form given `delta`,
/// damped Newton on `delta` with domain-checked, non-decreasing steps.
pub fn solve_inner(sur: &Surrogate<'_>, cfg: &SolverConfig) -> Result<InnerSolution> {
    let prof = Profiled { sur: *sur };
    let out = maximize(&prof, DVector::zeros(sur.n_delta()), &cfg.newton())?;
    if !out.converged {
        return Err(GlmmError::NonConvergence {
            what: "hyperparameter Newton iteration",
            iterations: out.iterations,
            last_change: out.last_step,
        });
    }
    let alpha = sur.profile_alpha(&out.x)?;
    let psi = sur.psi(&alpha, &out.x)?;
    Ok(InnerSolution {
        alpha,
        delta: out.x,
        psi,
        iterations: out.iterations,
        halvings: out.halvings,
        modified: out.modified,
    })
}

fn names(data: &GlmmData, cov: &CovarianceSpec) -> Vec<String> {
    let mut out: Vec<String> = (0..data.p()).map(|j| format!("beta{j}")).collect();
    out.extend(cov.free_names().into_iter().map(String::from));
    out
}

/// Fit from the family's data-driven start: solve the initial objective for `(beta, omega)`,
/// predict the random effects, then iterate to a fixed point.
pub fn fit(
    data: &GlmmData,
    family: &dyn ExponentialFamily,
    cov: &CovarianceSpec,
    cfg: &SolverConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    family.validate(data)?;
    let omega_init = cfg.omega_init.clone().unwrap_or_else(|| cov.omega.clone());
    cov.model.validate(&omega_init)?;
    let init = init_state(family, data);
    let state0 = WorkingState::new(
        data,
        cov,
        DVector::zeros(data.p()),
        omega_init.clone(),
        DVector::zeros(data.d()),
        init.clone(),
    )?;
    let sur = Surrogate::new(data, cov, &state0);
    let first = solve_inner(&sur, cfg)?;
    let beta = first.alpha.clone();
    let omega = cov.shifted(&omega_init, first.delta.as_slice());
    let pred = predict_random_effects(data, family, cov, &beta, &omega, &init, None, cfg)?;
    let mut events = Events::default();
    events.record(&first);
    iterate(data, family, cov, cfg, beta, omega, pred, events)
}

/// Fit starting from given `(beta, omega)`, skipping the data-driven initialization.
pub fn fit_from(
    data: &GlmmData,
    family: &dyn ExponentialFamily,
    cov: &CovarianceSpec,
    cfg: &SolverConfig,
    beta: &[f64],
    omega: &[f64],
) -> Result<FitResult> {
    cfg.validate()?;
    family.validate(data)?;
    if beta.len() != data.p() {
        return Err(GlmmError::invalid(format!("beta has length {}, expected {}", beta.len(), data.p())));
    }
    cov.model.validate(omega)?;
    let beta = DVector::from_column_slice(beta);
    let init = init_state(family, data);
    let pred = predict_random_effects(data, family, cov, &beta, omega, &init, None, cfg)?;
    iterate(data, family, cov, cfg, beta, omega.to_vec(), pred, Events::default())
}

#[derive(Default)]
struct Events {
    halved: usize,
    modified: usize,
}

impl Events {
    fn record(&mut self, s: &InnerSolution) {
        if s.halvings > 0 {
            self.halved += 1;
        }
        self.modified += s.modified;
    }
}

#[allow(clippy::too_many_arguments)]
fn iterate(
    data: &GlmmData,
    family: &dyn ExponentialFamily,
    cov: &CovarianceSpec,
    cfg: &SolverConfig,
    mut beta: DVector<f64>,
    mut omega: Vec<f64>,
    mut pred: Prediction,
    mut events: Events,
) -> Result<FitResult> {
    let mut trace = Vec::new();
    let mut last_step = f64::INFINITY;
    let mut t = 0;
    loop {
        let state = WorkingState::new(
            data,
            cov,
            beta.clone(),
            omega.clone(),
            pred.gammahat.clone(),
            pred.work.clone(),
        )?;
        let sur = Surrogate::new(data, cov, &state);
        let zero_a = DVector::zeros(data.p());
        let zero_d = DVector::zeros(cov.n_free());
        let ev = sur.eval(&zero_a, &zero_d)?;
        let grad_norm = max_abs(&ev.grad);
        let converged = last_step < cfg.outer_tol && grad_norm < cfg.grad_tol;
        if converged || t >= cfg.max_outer {
            return Ok(finish(data, family, cov, cfg, &state, ev, t, converged, trace, events));
        }
        let inner = solve_inner(&sur, cfg)?;
        events.record(&inner);
        let step = max_abs(&inner.alpha).max(max_abs(&inner.delta));
        t += 1;
        trace.push(TraceEntry {
            iteration: t,
            beta: beta.iter().copied().collect(),
            omega: omega.clone(),
            psi: ev.value,
            step,
        });
        beta += &inner.alpha;
        omega = cov.shifted(&omega, inner.delta.as_slice());
        pred = predict_random_effects(
            data,
            family,
            cov,
            &beta,
            &omega,
            &pred.work,
            Some(&pred.gammahat),
            cfg,
        )?;
        last_step = step;
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    data: &GlmmData,
    family: &dyn ExponentialFamily,
    cov: &CovarianceSpec,
    cfg: &SolverConfig,
    state: &WorkingState,
    ev: PsiEval,
    iterations: usize,
    converged: bool,
    trace: Vec<TraceEntry>,
    events: Events,
) -> FitResult {
    let mut warnings = Vec::new();
    if !converged {
        warnings.push(format!(
            "no convergence after {iterations} outer iterations (gradient max-norm {:.3e})",
            max_abs(&ev.grad)
        ));
    }
    if !state.work.clamped.is_empty() {
        warnings.push(format!(
            "working weights floored at {} observation(s): {:?}",
            state.work.clamped.len(),
            state.work.clamped
        ));
    }
    if events.halved > 0 {
        warnings.push(format!("step-halving used in {} Newton solve(s)", events.halved));
    }
    if events.modified > 0 {
        warnings.push(format!(
            "non-concave objective: Hessian modified in {} Newton iteration(s)",
            events.modified
        ));
    }
    // a second prediction from the data-driven start should land on the same fixed point
    let fresh = predict_random_effects(
        data,
        family,
        cov,
        &state.beta,
        &state.omega,
        &init_state(family, data),
        None,
        cfg,
    );
    match fresh {
        Ok(p) => {
            let gap = max_abs(&(&p.gammahat - &state.gammahat));
            if gap > 1e-6 {
                warnings.push(format!(
                    "random-effect prediction has another fixed point (max difference {gap:.3e})"
                ));
            }
        }
        Err(e) => warnings.push(format!("re-prediction from the initial state failed: {e}")),
    }
    let fisher = -ev.hess.clone();
    let se = match std_errors(&fisher) {
        Ok(v) => v.iter().copied().collect(),
        Err(e) => {
            warnings.push(format!("standard errors unavailable: {e}"));
            Vec::new()
        }
    };
    let k = ev.hess.nrows();
    FitResult {
        family: family.name().to_string(),
        covariance: cov.kind().to_string(),
        beta: state.beta.iter().copied().collect(),
        omega: state.omega.clone(),
        omega_fixed: cov.fixed.clone(),
        names: names(data, cov),
        gammahat: state.gammahat.iter().copied().collect(),
        psi0: ev.value,
        grad_norm: max_abs(&ev.grad),
        grad: ev.grad.iter().copied().collect(),
        hess: (0..k).map(|i| (0..k).map(|j| ev.hess[(i, j)]).collect()).collect(),
        se,
        iterations,
        converged,
        trace,
        warnings,
        data_digest: data.digest(),
    }
}

/// Fit from each start and keep the converged solution with the largest objective at `(0, 0)`.
pub fn multistart_fit(
    data: &GlmmData,
    family: &dyn ExponentialFamily,
    cov: &CovarianceSpec,
    cfg: &SolverConfig,
) -> Result<FitResult> {
    let starts = if cfg.starts.is_empty() {
        vec![cfg.omega_init.clone().unwrap_or_else(|| cov.omega.clone())]
    } else {
        cfg.starts.clone()
    };
    let runs: Vec<Result<FitResult>> = starts
        .par_iter()
        .map(|s| {
            let c = SolverConfig {
                omega_init: Some(s.clone()),
                starts: Vec::new(),
                ..cfg.clone()
            };
            fit(data, family, cov, &c)
        })
        .collect();
    let mut best: Option<(usize, FitResult)> = None;
    let mut failures = Vec::new();
    for (i, r) in runs.into_iter().enumerate() {
        match r {
            Ok(f) => {
                let better = match &best {
                    None => true,
                    Some((_, b)) => prefer(&f, b),
                };
                if better {
                    best = Some((i, f));
                }
            }
            Err(e) => failures.push((i, e)),
        }
    }
    match best {
        Some((i, mut f)) => {
            if starts.len() > 1 {
                f.warnings.extend(
                    failures
                        .iter()
                        .map(|(j, e)| format!("start {j} ({:?}) failed: {e}", starts[*j])),
                );
                if !f.converged {
                    f.warnings.push(format!("no start converged; returning start {i}"));
                }
            }
            Ok(f)
        }
        None => {
            let count = failures.len();
            let (_, first) = failures.into_iter().next().expect("at least one start");
            Err(GlmmError::StartsFailed {
                count,
                first: Box::new(first),
            })
        }
    }
}

/// Converged beats unconverged, then larger objective, then smaller gradient; earlier wins ties.
fn prefer(a: &FitResult, b: &FitResult) -> bool {
    if a.converged != b.converged {
        return a.converged;
    }
    let tol = 1e-10 * (1.0 + b.psi0.abs());
    if a.psi0 > b.psi0 + tol {
        return true;
    }
    if a.psi0 < b.psi0 - tol {
        return false;
    }
    a.grad_norm < b.grad_norm
}
