//! Dataset and configuration loading, and JSON/CSV reports.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariance::{CovarianceSpec, Geometry};
use crate::data::GlmmData;
use crate::error::{GlmmError, Result};
use crate::family::ExponentialFamily;
use crate::inference::TestResult;
use crate::registry;
use crate::simulate::{SimConfig, StudyResult};
use crate::solver::{FitResult, SolverConfig, TraceEntry};

fn io_err(path: &Path, source: std::io::Error) -> GlmmError {
    GlmmError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn cfg_err(key: impl Into<String>, message: impl Into<String>) -> GlmmError {
    GlmmError::Config {
        key: key.into(),
        message: message.into(),
    }
}

fn toml_err(e: toml::de::Error) -> GlmmError {
    let key = e.span().map_or_else(|| "<file>".to_string(), |s| format!("byte {}", s.start));
    cfg_err(key, e.message().to_string())
}

/// Which columns of a delimited file feed the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSchema {
    pub response: String,
    #[serde(default)]
    pub trials: Option<String>,
    #[serde(default)]
    pub covariates: Vec<String>,
    /// Two coordinate columns; gives one random effect per row and a distance matrix.
    #[serde(default)]
    pub coordinates: Option<[String; 2]>,
    /// Explicit random-effect design columns, used when no coordinates are given.
    #[serde(default)]
    pub z_columns: Vec<String>,
    #[serde(default = "yes")]
    pub intercept: bool,
    #[serde(default = "comma")]
    pub delimiter: char,
}

fn yes() -> bool {
    true
}

fn comma() -> char {
    ','
}

impl DatasetSchema {
    pub fn new(response: impl Into<String>) -> Self {
        Self {
            response: response.into(),
            trials: None,
            covariates: Vec::new(),
            coordinates: None,
            z_columns: Vec::new(),
            intercept: true,
            delimiter: ',',
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(toml_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&read_text(path)?)
    }
}

fn cell(record: &csv::StringRecord, idx: usize, row: usize, column: &str) -> Result<f64> {
    let raw = record.get(idx).unwrap_or("").trim();
    let data_err = |message: String| GlmmError::Data {
        row,
        column: column.to_string(),
        message,
    };
    if raw.is_empty() || raw.eq_ignore_ascii_case("na") {
        return Err(data_err("missing value".into()));
    }
    let v: f64 = raw
        .parse()
        .map_err(|_| data_err(format!("`{raw}` is not a number")))?;
    if !v.is_finite() {
        return Err(data_err(format!("`{raw}` is not finite")));
    }
    Ok(v)
}

/// Read a delimited file with a header row. Rows are numbered from 1, not counting the header.
pub fn load_dataset(path: &Path, schema: &DatasetSchema) -> Result<GlmmData> {
    if !schema.delimiter.is_ascii() {
        return Err(cfg_err("delimiter", "must be a single ASCII character"));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let col = |name: &str| {
        header.iter().position(|h| h.trim() == name).ok_or_else(|| GlmmError::Data {
            row: 0,
            column: name.to_string(),
            message: format!("column not found in header of {}", path.display()),
        })
    };
    let y_idx = col(&schema.response)?;
    let m_idx = schema.trials.as_deref().map(col).transpose()?;
    let x_idx: Vec<usize> = schema.covariates.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let s_idx = match &schema.coordinates {
        Some([a, b]) => Some((col(a)?, col(b)?)),
        None => None,
    };
    let z_idx: Vec<usize> = schema.z_columns.iter().map(|c| col(c)).collect::<Result<_>>()?;
    if s_idx.is_some() && !z_idx.is_empty() {
        return Err(cfg_err("schema", "give either coordinates or z_columns, not both"));
    }

    let mut y = Vec::new();
    let mut m = Vec::new();
    let mut xs = Vec::new();
    let mut sites = Vec::new();
    let mut zs = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let yi = cell(&rec, y_idx, row, &schema.response)?;
        if let (Some(k), Some(name)) = (m_idx, &schema.trials) {
            let mi = cell(&rec, k, row, name)?;
            if yi > mi {
                return Err(GlmmError::Data {
                    row,
                    column: schema.response.clone(),
                    message: format!("response {yi} exceeds trials {mi}"),
                });
            }
            m.push(mi);
        }
        y.push(yi);
        for (k, name) in x_idx.iter().zip(&schema.covariates) {
            xs.push(cell(&rec, *k, row, name)?);
        }
        if let (Some((a, b)), Some([na, nb])) = (s_idx, &schema.coordinates) {
            sites.push([cell(&rec, a, row, na)?, cell(&rec, b, row, nb)?]);
        }
        for (k, name) in z_idx.iter().zip(&schema.z_columns) {
            zs.push(cell(&rec, *k, row, name)?);
        }
    }
    let n = y.len();
    if n == 0 {
        return Err(GlmmError::Data {
            row: 1,
            column: schema.response.clone(),
            message: "file has no data rows".into(),
        });
    }
    let offset = usize::from(schema.intercept);
    let p = offset + schema.covariates.len();
    if p == 0 {
        return Err(cfg_err("covariates", "no intercept and no covariates"));
    }
    let kx = schema.covariates.len();
    let x = DMatrix::from_fn(n, p, |i, j| if j < offset { 1.0 } else { xs[i * kx + j - offset] });
    let y = DVector::from_vec(y);
    let trials = m_idx.map(|_| DVector::from_vec(m));
    if s_idx.is_some() {
        return GlmmData::spatial(y, trials, x, sites);
    }
    let z = if z_idx.is_empty() {
        DMatrix::identity(n, n)
    } else {
        let kz = z_idx.len();
        DMatrix::from_fn(n, kz, |i, j| zs[i * kz + j])
    };
    GlmmData::new(y, trials, x, z, None)
}

fn csv_err(path: &Path, e: csv::Error) -> GlmmError {
    let row = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => io_err(path, source),
        kind => GlmmError::Data {
            row,
            column: String::new(),
            message: format!("{kind:?}"),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceConfig {
    #[serde(default = "matern")]
    pub kind: String,
    /// Starting (and, for fixed entries, held) hyperparameters; model default when absent.
    #[serde(default)]
    pub init: Option<Vec<f64>>,
    #[serde(default)]
    pub fixed: Option<Vec<bool>>,
    #[serde(default)]
    pub jitter: f64,
}

fn matern() -> String {
    "matern".into()
}

impl Default for CovarianceConfig {
    fn default() -> Self {
        Self {
            kind: matern(),
            init: None,
            fixed: None,
            jitter: 0.0,
        }
    }
}

/// Everything a `fit` run needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Required.
    #[serde(default)]
    pub family: Option<String>,
    #[serde(default)]
    pub covariance: CovarianceConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    /// Use the covariance model's default start grid when `solver.starts` is empty.
    #[serde(default)]
    pub multistart: bool,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output: Option<String>,
    #[serde(default)]
    pub data: Option<DatasetSchema>,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(toml_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&read_text(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let family = self
            .family
            .as_deref()
            .ok_or_else(|| cfg_err("family", "required (binomial or poisson)"))?;
        registry::families()
            .get(family)
            .map_err(|e| cfg_err("family", e.to_string()))?;
        let model = registry::covariances()
            .get(&self.covariance.kind)
            .map_err(|e| cfg_err("covariance.kind", e.to_string()))?;
        let r = model.param_names().len();
        if let Some(init) = &self.covariance.init {
            if init.len() != r {
                return Err(cfg_err("covariance.init", format!("{} expects {r} values", model.name())));
            }
            model
                .validate(init)
                .map_err(|e| cfg_err("covariance.init", e.to_string()))?;
        }
        if let Some(mask) = &self.covariance.fixed {
            if mask.len() != r {
                return Err(cfg_err("covariance.fixed", format!("{} expects {r} flags", model.name())));
            }
        }
        if !(self.covariance.jitter >= 0.0 && self.covariance.jitter.is_finite()) {
            return Err(cfg_err("covariance.jitter", "must be finite and nonnegative"));
        }
        for (k, s) in self.solver.starts.iter().enumerate() {
            if s.len() != r {
                return Err(cfg_err(format!("solver.starts[{k}]"), format!("expects {r} values")));
            }
        }
        self.solver.validate()
    }

    pub fn family(&self) -> Result<Arc<dyn ExponentialFamily>> {
        let name = self
            .family
            .as_deref()
            .ok_or_else(|| cfg_err("family", "required (binomial or poisson)"))?;
        registry::families().get(name)
    }

    /// Covariance spec on the data's random-effect geometry.
    pub fn covariance_spec(&self, data: &GlmmData) -> Result<CovarianceSpec> {
        let model = registry::covariances().get(&self.covariance.kind)?;
        let omega = self.covariance.init.clone().unwrap_or_else(|| model.default_omega());
        let fixed = self.covariance.fixed.clone().unwrap_or_else(|| model.default_fixed());
        let geometry = Geometry {
            dim: data.d(),
            distances: data.distances(),
        };
        CovarianceSpec::new(model, omega, fixed, geometry, self.covariance.jitter)
    }

    /// Solver settings with the multistart grid filled in when requested.
    pub fn solver_for(&self, cov: &CovarianceSpec) -> SolverConfig {
        let mut s = self.solver.clone();
        if self.multistart && s.starts.is_empty() {
            s.starts = cov
                .model
                .default_starts()
                .into_iter()
                .map(|start| {
                    start
                        .iter()
                        .zip(&cov.omega)
                        .zip(&cov.fixed)
                        .map(|((v, held), f)| if *f { *held } else { *v })
                        .collect()
                })
                .collect();
        }
        s
    }
}

pub fn load_sim_config(path: &Path) -> Result<SimConfig> {
    let cfg: SimConfig = toml::from_str(&read_text(path)?).map_err(toml_err)?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Estimates {
    pub beta: Vec<f64>,
    pub omega: Vec<f64>,
}

/// On-disk form of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitReport {
    pub family: String,
    pub covariance: String,
    pub estimates: Estimates,
    pub omega_fixed: Vec<bool>,
    pub names: Vec<String>,
    pub se: Vec<f64>,
    pub psi0: f64,
    pub grad: Vec<f64>,
    pub grad_norm: f64,
    pub hess: Vec<Vec<f64>>,
    pub converged: bool,
    pub iterations: usize,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<TraceEntry>,
    pub gammahat: Vec<f64>,
    pub data_digest: String,
}

impl From<&FitResult> for FitReport {
    fn from(f: &FitResult) -> Self {
        Self {
            family: f.family.clone(),
            covariance: f.covariance.clone(),
            estimates: Estimates {
                beta: f.beta.clone(),
                omega: f.omega.clone(),
            },
            omega_fixed: f.omega_fixed.clone(),
            names: f.names.clone(),
            se: f.se.clone(),
            psi0: f.psi0,
            grad: f.grad.clone(),
            grad_norm: f.grad_norm,
            hess: f.hess.clone(),
            converged: f.converged,
            iterations: f.iterations,
            warnings: f.warnings.clone(),
            trace: f.trace.clone(),
            gammahat: f.gammahat.clone(),
            data_digest: f.data_digest.clone(),
        }
    }
}

impl From<FitReport> for FitResult {
    fn from(r: FitReport) -> Self {
        Self {
            family: r.family,
            covariance: r.covariance,
            beta: r.estimates.beta,
            omega: r.estimates.omega,
            omega_fixed: r.omega_fixed,
            names: r.names,
            gammahat: r.gammahat,
            psi0: r.psi0,
            grad: r.grad,
            grad_norm: r.grad_norm,
            hess: r.hess,
            se: r.se,
            iterations: r.iterations,
            converged: r.converged,
            trace: r.trace,
            warnings: r.warnings,
            data_digest: r.data_digest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestReport {
    pub tests: Vec<TestResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleCheckReport {
    pub loglik: f64,
    pub score: Vec<f64>,
    pub score_max_norm: f64,
    pub nodes_per_dim: usize,
    pub warnings: Vec<String>,
}

/// Pretty JSON. Floats use the shortest representation that parses back to the same bits.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn write_report<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    write_text(path, &to_json(value)?)
}

pub fn write_fit(fit: &FitResult, path: &Path) -> Result<()> {
    write_report(&FitReport::from(fit), path)
}

pub fn read_fit(path: &Path) -> Result<FitResult> {
    let r: FitReport = serde_json::from_str(&read_text(path)?)?;
    Ok(r.into())
}

/// CSV next to the JSON study report.
pub fn write_study(study: &StudyResult, json_path: &Path) -> Result<()> {
    write_report(study, json_path)?;
    write_text(&json_path.with_extension("csv"), &study.to_csv()?)
}
