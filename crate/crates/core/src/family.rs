//! Canonical-link exponential families: cumulant function, working response and weights.

use std::fmt;

use nalgebra::DVector;
use rand::RngCore;
use rand_distr::{Binomial as BinomialDist, Distribution, Poisson as PoissonDist};
use statrs::function::gamma::ln_gamma;

use crate::data::GlmmData;
use crate::error::{GlmmError, Result};

/// Working weights below this value are clamped so that `W^{-1}` stays finite.
pub const WEIGHT_FLOOR: f64 = 1e-10;

/// `b(eta)` and its first two derivatives at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cumulants {
    pub b: f64,
    pub b1: f64,
    pub b2: f64,
}

/// A one-parameter exponential family under its canonical link.
pub trait ExponentialFamily: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    /// Check family-specific constraints on the data (trials, response range).
    fn validate(&self, data: &GlmmData) -> Result<()>;

    /// `b`, `b'`, `b''` at `eta` for an observation with `m` trials (ignored by Poisson).
    fn cumulants(&self, eta: f64, m: f64) -> Cumulants;

    /// `c(y)`, the log normalizer.
    fn log_normalizer(&self, y: f64, m: f64) -> f64;

    /// Starting linear predictor for one observation.
    fn initial_eta(&self, y: f64, m: f64) -> f64;

    /// Draw a response given the linear predictor.
    fn sample(&self, eta: f64, m: f64, rng: &mut dyn RngCore) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BinomialLogit;

#[derive(Debug, Clone, Copy, Default)]
pub struct PoissonLog;

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function and `p(1-p)`, each evaluated on the stable branch for the sign of `x`.
fn logistic(x: f64) -> (f64, f64) {
    let e = (-x.abs()).exp();
    let small = e / (1.0 + e);
    let large = 1.0 / (1.0 + e);
    let p = if x >= 0.0 { large } else { small };
    (p, small * large)
}

impl ExponentialFamily for BinomialLogit {
    fn name(&self) -> &'static str {
        "binomial"
    }

    fn validate(&self, data: &GlmmData) -> Result<()> {
        let m = data
            .trials
            .as_ref()
            .ok_or_else(|| GlmmError::invalid("binomial family requires a trials vector"))?;
        for i in 0..data.n() {
            let (yi, mi) = (data.y[i], m[i]);
            if !(mi >= 1.0 && mi.fract() == 0.0) {
                return Err(GlmmError::Data {
                    row: i + 1,
                    column: "trials".into(),
                    message: format!("trials {mi} must be an integer >= 1"),
                });
            }
            if yi > mi {
                return Err(GlmmError::Data {
                    row: i + 1,
                    column: "y".into(),
                    message: format!("response {yi} exceeds trials {mi}"),
                });
            }
        }
        Ok(())
    }

    fn cumulants(&self, eta: f64, m: f64) -> Cumulants {
        let (p, v) = logistic(eta);
        Cumulants {
            b: m * softplus(eta),
            b1: m * p,
            b2: m * v,
        }
    }

    fn log_normalizer(&self, y: f64, m: f64) -> f64 {
        ln_gamma(m + 1.0) - ln_gamma(y + 1.0) - ln_gamma(m - y + 1.0)
    }

    fn initial_eta(&self, y: f64, m: f64) -> f64 {
        ((y + 0.5) / (m - y + 0.5)).ln()
    }

    fn sample(&self, eta: f64, m: f64, rng: &mut dyn RngCore) -> Result<f64> {
        let (p, _) = logistic(eta);
        let dist = BinomialDist::new(m as u64, p)
            .map_err(|e| GlmmError::invalid(format!("binomial draw: {e}")))?;
        Ok(dist.sample(rng) as f64)
    }
}

impl ExponentialFamily for PoissonLog {
    fn name(&self) -> &'static str {
        "poisson"
    }

    fn validate(&self, _data: &GlmmData) -> Result<()> {
        Ok(())
    }

    fn cumulants(&self, eta: f64, _m: f64) -> Cumulants {
        let e = eta.exp();
        Cumulants { b: e, b1: e, b2: e }
    }

    fn log_normalizer(&self, y: f64, _m: f64) -> f64 {
        -ln_gamma(y + 1.0)
    }

    fn initial_eta(&self, y: f64, _m: f64) -> f64 {
        (y + 0.5).ln()
    }

    fn sample(&self, eta: f64, _m: f64, rng: &mut dyn RngCore) -> Result<f64> {
        let rate = eta.exp();
        if !(rate <= 1e15) {
            return Err(GlmmError::invalid(format!(
                "Poisson rate e^{eta:.3} exceeds 1e15; lower the intercept"
            )));
        }
        if rate <= 0.0 {
            return Ok(0.0);
        }
        let dist = PoissonDist::new(rate)
            .map_err(|e| GlmmError::invalid(format!("Poisson draw: {e}")))?;
        Ok(dist.sample(rng))
    }
}

/// Linear predictor, working response and working weights at one iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkingVectors {
    pub eta: DVector<f64>,
    pub ytilde: DVector<f64>,
    pub w: DVector<f64>,
    /// Indices whose weight was raised to [`WEIGHT_FLOOR`].
    pub clamped: Vec<usize>,
}

impl WorkingVectors {
    pub fn w_inv(&self) -> DVector<f64> {
        self.w.map(|v| 1.0 / v)
    }
}

fn trials_at(data: &GlmmData, i: usize) -> f64 {
    data.trials.as_ref().map_or(1.0, |m| m[i])
}

/// Elementwise `(b, b', b'')`.
pub fn eval_b(
    family: &dyn ExponentialFamily,
    trials: Option<&DVector<f64>>,
    eta: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let n = eta.len();
    let mut b = DVector::zeros(n);
    let mut b1 = DVector::zeros(n);
    let mut b2 = DVector::zeros(n);
    for i in 0..n {
        let c = family.cumulants(eta[i], trials.map_or(1.0, |m| m[i]));
        b[i] = c.b;
        b1[i] = c.b1;
        b2[i] = c.b2;
    }
    (b, b1, b2)
}

/// `ytilde = eta + (y - b'(eta)) / b''(eta)`, `W = diag(b''(eta))`, weights floored.
pub fn working_response(
    family: &dyn ExponentialFamily,
    data: &GlmmData,
    eta: &DVector<f64>,
) -> WorkingVectors {
    let n = data.n();
    let mut ytilde = DVector::zeros(n);
    let mut w = DVector::zeros(n);
    let mut clamped = Vec::new();
    for i in 0..n {
        let c = family.cumulants(eta[i], trials_at(data, i));
        let mut wi = c.b2;
        if !(wi >= WEIGHT_FLOOR) {
            wi = WEIGHT_FLOOR;
            clamped.push(i);
        }
        w[i] = wi;
        ytilde[i] = eta[i] + (data.y[i] - c.b1) / wi;
    }
    WorkingVectors {
        eta: eta.clone(),
        ytilde,
        w,
        clamped,
    }
}

/// Working vectors at the family's starting linear predictor.
///
/// The binomial start `log((y+0.5)/(m-y+0.5))` reproduces the weight
/// `m(y+0.5)(m-y+0.5)/(m+1)^2`; the Poisson start `log(y+0.5)` gives weight `y+0.5` and
/// working response `log(y+0.5) - 0.5/(y+0.5)`.
pub fn init_state(family: &dyn ExponentialFamily, data: &GlmmData) -> WorkingVectors {
    let eta = DVector::from_fn(data.n(), |i, _| {
        family.initial_eta(data.y[i], trials_at(data, i))
    });
    working_response(family, data, &eta)
}

/// `y'eta - 1'b(eta) + 1'c(y)`.
pub fn loglik_conditional(
    family: &dyn ExponentialFamily,
    data: &GlmmData,
    eta: &DVector<f64>,
) -> f64 {
    (0..data.n())
        .map(|i| {
            let m = trials_at(data, i);
            let c = family.cumulants(eta[i], m);
            data.y[i] * eta[i] - c.b + family.log_normalizer(data.y[i], m)
        })
        .sum()
}
