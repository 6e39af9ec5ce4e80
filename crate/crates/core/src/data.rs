//! The observed problem instance.

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::error::{GlmmError, Result};

/// Responses, designs, and (optionally) the site coordinates of the random effects.
#[derive(Debug, Clone)]
pub struct GlmmData {
    pub y: DVector<f64>,
    /// Binomial trials; `None` for Poisson data.
    pub trials: Option<DVector<f64>>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    /// One coordinate pair per random effect (column of `z`).
    pub sites: Option<Vec<[f64; 2]>>,
    z_identity: bool,
}

impl GlmmData {
    pub fn new(
        y: DVector<f64>,
        trials: Option<DVector<f64>>,
        x: DMatrix<f64>,
        z: DMatrix<f64>,
        sites: Option<Vec<[f64; 2]>>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(GlmmError::invalid("empty response vector"));
        }
        if x.nrows() != n || z.nrows() != n {
            return Err(GlmmError::invalid(format!(
                "design row counts (X: {}, Z: {}) do not match n = {n}",
                x.nrows(),
                z.nrows()
            )));
        }
        if x.ncols() == 0 || z.ncols() == 0 {
            return Err(GlmmError::invalid("X and Z need at least one column"));
        }
        if let Some(m) = &trials {
            if m.len() != n {
                return Err(GlmmError::invalid("trials length differs from n"));
            }
        }
        if let Some(s) = &sites {
            if s.len() != z.ncols() {
                return Err(GlmmError::invalid(format!(
                    "{} site coordinates for {} random effects",
                    s.len(),
                    z.ncols()
                )));
            }
        }
        for (i, v) in y.iter().enumerate() {
            if !(v.is_finite() && *v >= 0.0 && v.fract() == 0.0) {
                return Err(GlmmError::Data {
                    row: i + 1,
                    column: "y".into(),
                    message: format!("response {v} is not a nonnegative integer"),
                });
            }
        }
        if x.iter().chain(z.iter()).any(|v| !v.is_finite()) {
            return Err(GlmmError::invalid("non-finite entry in a design matrix"));
        }
        check_full_rank(&x, "X")?;
        check_full_rank(&z, "Z")?;
        let z_identity = z.nrows() == z.ncols() && z == DMatrix::identity(n, n);
        Ok(Self {
            y,
            trials,
            x,
            z,
            sites,
            z_identity,
        })
    }

    /// One random effect per observation: `Z = I`.
    pub fn spatial(
        y: DVector<f64>,
        trials: Option<DVector<f64>>,
        x: DMatrix<f64>,
        sites: Vec<[f64; 2]>,
    ) -> Result<Self> {
        let n = y.len();
        Self::new(y, trials, x, DMatrix::identity(n, n), Some(sites))
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn d(&self) -> usize {
        self.z.ncols()
    }

    pub fn z_is_identity(&self) -> bool {
        self.z_identity
    }

    /// `Z v` with the identity shortcut.
    pub fn z_mul(&self, v: &DVector<f64>) -> DVector<f64> {
        if self.z_identity {
            v.clone()
        } else {
            &self.z * v
        }
    }

    /// `Z M Z'` with the identity shortcut.
    pub fn z_sandwich(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        if self.z_identity {
            m.clone()
        } else {
            &self.z * m * self.z.transpose()
        }
    }

    /// Euclidean distances between the random-effect sites.
    pub fn distances(&self) -> Option<DMatrix<f64>> {
        self.sites.as_ref().map(|s| distance_matrix(s))
    }

    /// Stable fingerprint of the response, trials and sites, used to match fits of the same data.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n() as u64).to_le_bytes());
        for v in self.y.iter() {
            h.update(v.to_le_bytes());
        }
        if let Some(m) = &self.trials {
            for v in m.iter() {
                h.update(v.to_le_bytes());
            }
        }
        if let Some(s) = &self.sites {
            for p in s {
                h.update(p[0].to_le_bytes());
                h.update(p[1].to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Same data with fixed-effect design `x` swapped in.
    pub fn with_design(&self, x: DMatrix<f64>) -> Result<Self> {
        Self::new(
            self.y.clone(),
            self.trials.clone(),
            x,
            self.z.clone(),
            self.sites.clone(),
        )
    }
}

pub fn distance_matrix(sites: &[[f64; 2]]) -> DMatrix<f64> {
    let d = sites.len();
    DMatrix::from_fn(d, d, |i, j| {
        let dx = sites[i][0] - sites[j][0];
        let dy = sites[i][1] - sites[j][1];
        (dx * dx + dy * dy).sqrt()
    })
}

/// Incidence matrix mapping each observation to its group index.
pub fn incidence(groups: &[usize], n_groups: usize) -> DMatrix<f64> {
    let mut z = DMatrix::zeros(groups.len(), n_groups);
    for (i, g) in groups.iter().enumerate() {
        z[(i, *g)] = 1.0;
    }
    z
}

fn check_full_rank(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if m.ncols() > m.nrows() {
        return Err(GlmmError::invalid(format!(
            "{name} has more columns ({}) than rows ({})",
            m.ncols(),
            m.nrows()
        )));
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().fold(0.0_f64, |a, v| a.max(*v));
    let min = sv.iter().fold(f64::INFINITY, |a, v| a.min(*v));
    if !(max > 0.0) || min <= max * 1e-10 * (m.nrows().max(m.ncols()) as f64) {
        return Err(GlmmError::invalid(format!("{name} is not of full column rank")));
    }
    Ok(())
}
