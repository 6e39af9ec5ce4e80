//! Name-keyed lookup of families, covariance models and study estimators.

use std::fmt;
use std::sync::Arc;

use crate::covariance::{CovarianceModel, Exponential, Matern, ScaledIdentity};
use crate::error::{GlmmError, Result};
use crate::family::{BinomialLogit, ExponentialFamily, PoissonLog};
use crate::simulate::{Estimator, OracleEstimator, ProposedEstimator};

/// An ordered set of named strategies sharing one trait.
pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: Vec<(String, Arc<T>)>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: Vec::new(),
        }
    }

    /// Add or replace the entry under `name`.
    pub fn register(&mut self, name: impl Into<String>, item: Arc<T>) -> &mut Self {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = item,
            None => self.entries.push((name, item)),
        }
        self
    }

    pub fn get(&self, name: &str) -> Result<Arc<T>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| Arc::clone(v))
            .ok_or_else(|| GlmmError::UnknownName {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }
}

impl<T: ?Sized> fmt::Debug for Registry<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("kind", &self.kind)
            .field("names", &self.names())
            .finish()
    }
}

pub fn families() -> Registry<dyn ExponentialFamily> {
    let mut r = Registry::<dyn ExponentialFamily>::new("family");
    r.register("binomial", Arc::new(BinomialLogit));
    r.register("poisson", Arc::new(PoissonLog));
    r
}

pub fn covariances() -> Registry<dyn CovarianceModel> {
    let mut r = Registry::<dyn CovarianceModel>::new("covariance");
    r.register("matern", Arc::new(Matern));
    r.register("exponential", Arc::new(Exponential));
    r.register("scaled-identity", Arc::new(ScaledIdentity));
    r
}

pub fn estimators() -> Registry<dyn Estimator> {
    let mut r = Registry::<dyn Estimator>::new("estimator");
    r.register("proposed", Arc::new(ProposedEstimator));
    r.register("oracle", Arc::new(OracleEstimator));
    r
}
