//! Variance-component models `D_omega` and their hyperparameter derivatives.

mod bessel;
mod models;

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

pub use bessel::{bessel_k, bessel_k_scaled};
pub use models::{matern_correlation, Exponential, Matern, ScaledIdentity};

use crate::error::{GlmmError, Result};
use crate::linalg::SpdFactor;

/// Relative step for first-derivative central differences.
pub(crate) const FD_STEP: f64 = 1e-6;
/// Relative step for second-derivative stencils.
pub(crate) const FD_STEP2: f64 = 1e-4;

/// Where the random effects live: their count and, for spatial models, pairwise distances.
#[derive(Debug, Clone)]
pub struct Geometry {
    pub dim: usize,
    pub distances: Option<DMatrix<f64>>,
}

/// A parametric family of covariance matrices for the random effects.
///
/// Implementations return `D_omega` without the jitter term; [`CovarianceSpec`] adds it.
pub trait CovarianceModel: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn param_names(&self) -> &'static [&'static str];

    fn needs_distances(&self) -> bool;

    fn default_omega(&self) -> Vec<f64>;

    fn default_fixed(&self) -> Vec<bool> {
        vec![false; self.param_names().len()]
    }

    /// Starting points for multi-start fitting (full hyperparameter vectors).
    fn default_starts(&self) -> Vec<Vec<f64>>;

    /// Check `omega` against the model's domain, naming the violated constraint.
    fn validate(&self, omega: &[f64]) -> Result<()>;

    fn build(&self, omega: &[f64], geom: &Geometry) -> Result<DMatrix<f64>>;

    /// `dD/domega_j`.
    fn d_build(&self, omega: &[f64], j: usize, geom: &Geometry) -> Result<DMatrix<f64>>;

    /// `d^2 D / (domega_j1 domega_j2)`.
    fn d2_build(&self, omega: &[f64], j1: usize, j2: usize, geom: &Geometry)
        -> Result<DMatrix<f64>>;
}

/// A covariance model bound to hyperparameter values, a fixed mask and a geometry.
#[derive(Debug, Clone)]
pub struct CovarianceSpec {
    pub model: Arc<dyn CovarianceModel>,
    pub omega: Vec<f64>,
    pub fixed: Vec<bool>,
    pub geometry: Geometry,
    pub jitter: f64,
}

impl CovarianceSpec {
    pub fn new(
        model: Arc<dyn CovarianceModel>,
        omega: Vec<f64>,
        fixed: Vec<bool>,
        geometry: Geometry,
        jitter: f64,
    ) -> Result<Self> {
        let r = model.param_names().len();
        if omega.len() != r || fixed.len() != r {
            return Err(GlmmError::invalid(format!(
                "{} expects {r} hyperparameters, got omega of length {} and mask of length {}",
                model.name(),
                omega.len(),
                fixed.len()
            )));
        }
        if !(jitter >= 0.0 && jitter.is_finite()) {
            return Err(GlmmError::invalid("jitter must be finite and nonnegative"));
        }
        if model.needs_distances() {
            let dist = geometry.distances.as_ref().ok_or_else(|| {
                GlmmError::invalid(format!("{} covariance requires site coordinates", model.name()))
            })?;
            validate_distances(dist, geometry.dim, jitter)?;
        }
        let spec = Self {
            model,
            omega,
            fixed,
            geometry,
            jitter,
        };
        spec.validate_domain()?;
        Ok(spec)
    }

    /// Spec with the model's default hyperparameters and mask.
    pub fn with_defaults(model: Arc<dyn CovarianceModel>, geometry: Geometry) -> Result<Self> {
        let omega = model.default_omega();
        let fixed = model.default_fixed();
        Self::new(model, omega, fixed, geometry, 0.0)
    }

    pub fn kind(&self) -> &'static str {
        self.model.name()
    }

    pub fn dim(&self) -> usize {
        self.geometry.dim
    }

    pub fn validate_domain(&self) -> Result<()> {
        self.model.validate(&self.omega)
    }

    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.omega.len()).filter(|j| !self.fixed[*j]).collect()
    }

    pub fn n_free(&self) -> usize {
        self.fixed.iter().filter(|f| !**f).count()
    }

    pub fn free_values(&self) -> Vec<f64> {
        self.free_indices().iter().map(|j| self.omega[*j]).collect()
    }

    pub fn free_names(&self) -> Vec<&'static str> {
        let names = self.model.param_names();
        self.free_indices().iter().map(|j| names[*j]).collect()
    }

    /// Full hyperparameter vector with the free entries replaced by `free`.
    pub fn expand(&self, free: &[f64]) -> Vec<f64> {
        let mut out = self.omega.clone();
        for (k, j) in self.free_indices().into_iter().enumerate() {
            out[j] = free[k];
        }
        out
    }

    /// Full hyperparameter vector with `delta` added to the free entries of `omega`.
    pub fn shifted(&self, omega: &[f64], delta: &[f64]) -> Vec<f64> {
        let mut out = omega.to_vec();
        for (k, j) in self.free_indices().into_iter().enumerate() {
            out[j] += delta[k];
        }
        out
    }

    /// Same spec at different hyperparameter values.
    pub fn at(&self, omega: Vec<f64>) -> Result<Self> {
        self.model.validate(&omega)?;
        Ok(Self {
            omega,
            ..self.clone()
        })
    }

    /// `D_omega + jitter I`.
    pub fn build_d(&self) -> Result<DMatrix<f64>> {
        self.build_d_at(&self.omega)
    }

    pub fn build_d_at(&self, omega: &[f64]) -> Result<DMatrix<f64>> {
        self.model.validate(omega)?;
        let mut d = self.model.build(omega, &self.geometry)?;
        if self.jitter > 0.0 {
            for i in 0..d.nrows() {
                d[(i, i)] += self.jitter;
            }
        }
        Ok(d)
    }

    /// `D_omega` and its Cholesky factor; fails with the smallest pivot if not positive definite.
    pub fn factor_d_at(&self, omega: &[f64]) -> Result<(DMatrix<f64>, SpdFactor)> {
        let d = self.build_d_at(omega)?;
        let f = SpdFactor::new(d.clone(), "D")?;
        Ok((d, f))
    }

    /// `dD/domega_j`, `j` indexing the full hyperparameter vector.
    pub fn d_domega(&self, omega: &[f64], j: usize) -> Result<DMatrix<f64>> {
        self.model.validate(omega)?;
        self.model.d_build(omega, j, &self.geometry)
    }

    pub fn d2_domega2(&self, omega: &[f64], j1: usize, j2: usize) -> Result<DMatrix<f64>> {
        self.model.validate(omega)?;
        self.model.d2_build(omega, j1, j2, &self.geometry)
    }
}

fn validate_distances(dist: &DMatrix<f64>, dim: usize, jitter: f64) -> Result<()> {
    if dist.nrows() != dim || dist.ncols() != dim {
        return Err(GlmmError::invalid(format!(
            "distance matrix is {}x{}, expected {dim}x{dim}",
            dist.nrows(),
            dist.ncols()
        )));
    }
    for i in 0..dim {
        if dist[(i, i)] != 0.0 {
            return Err(GlmmError::invalid(format!("distance ({i},{i}) is not zero")));
        }
        for j in (i + 1)..dim {
            let v = dist[(i, j)];
            if !(v.is_finite() && v >= 0.0) || v != dist[(j, i)] {
                return Err(GlmmError::invalid(format!(
                    "distances ({i},{j}) must be finite, nonnegative and symmetric"
                )));
            }
            if v == 0.0 && jitter == 0.0 {
                return Err(GlmmError::invalid(format!(
                    "sites {i} and {j} coincide; set a positive jitter or merge the sites"
                )));
            }
        }
    }
    Ok(())
}
