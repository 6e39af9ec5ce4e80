use nalgebra::DMatrix;
use statrs::function::gamma::ln_gamma;

use super::bessel::bessel_k_scaled;
use super::{CovarianceModel, Geometry, FD_STEP, FD_STEP2};
use crate::error::{GlmmError, Result};

/// Matérn correlation `(t)^nu / (2^{nu-1} Gamma(nu)) K_nu(t)` at `t = scale * distance`.
///
/// Equals `exp(-t)` at `nu = 1/2` and 1 at `t = 0`.
pub fn matern_correlation(t: f64, nu: f64) -> Result<f64> {
    if t == 0.0 {
        return Ok(1.0);
    }
    if nu == 0.5 {
        return Ok((-t).exp());
    }
    let log_rho =
        nu * t.ln() - (nu - 1.0) * std::f64::consts::LN_2 - ln_gamma(nu) - t + bessel_k_scaled(nu, t)?.ln();
    Ok(log_rho.exp())
}

fn distances(geom: &Geometry) -> Result<&DMatrix<f64>> {
    geom.distances
        .as_ref()
        .ok_or_else(|| GlmmError::invalid("spatial covariance requires a distance matrix"))
}

/// Correlation matrix with unit diagonal; sites at distance zero are fully correlated.
fn corr_matrix(dist: &DMatrix<f64>, scale: f64, nu: f64) -> Result<DMatrix<f64>> {
    let n = dist.nrows();
    let mut c = DMatrix::identity(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = matern_correlation(scale * dist[(i, j)], nu)?;
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    Ok(c)
}

/// Elementwise map over off-diagonal distances with zero diagonal.
fn offdiag_map(dist: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let n = dist.nrows();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = f(dist[(i, j)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

fn variance_factor(w1: f64) -> (f64, f64, f64) {
    let q = 1.0 - w1;
    (w1 / q, 1.0 / (q * q), 2.0 / (q * q * q))
}

fn check_open_unit(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(GlmmError::domain(format!("{name} must be in (0,1), got {v}")))
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(GlmmError::domain(format!("{name} must be > 0, got {v}")))
    }
}

fn check_len(omega: &[f64], r: usize, name: &str) -> Result<()> {
    if omega.len() == r {
        Ok(())
    } else {
        Err(GlmmError::invalid(format!(
            "{name} expects {r} hyperparameters, got {}",
            omega.len()
        )))
    }
}

/// Derivatives of the correlation matrix in `(scale, nu)`; index 0 is scale, 1 is nu.
struct CorrDerivs<'a> {
    dist: &'a DMatrix<f64>,
    scale: f64,
    nu: f64,
}

impl CorrDerivs<'_> {
    fn at(&self, scale: f64, nu: f64) -> Result<DMatrix<f64>> {
        corr_matrix(self.dist, scale, nu)
    }

    fn coord(&self, k: usize) -> f64 {
        if k == 0 {
            self.scale
        } else {
            self.nu
        }
    }

    fn shifted(&self, k: usize, h: f64) -> (f64, f64) {
        if k == 0 {
            (self.scale + h, self.nu)
        } else {
            (self.scale, self.nu + h)
        }
    }

    fn first(&self, k: usize) -> Result<DMatrix<f64>> {
        if k == 0 && self.nu == 0.5 {
            let s = self.scale;
            return Ok(offdiag_map(self.dist, |d| -d * (-s * d).exp()));
        }
        let h = FD_STEP * self.coord(k).abs().max(1.0);
        let (s1, n1) = self.shifted(k, h);
        let (s0, n0) = self.shifted(k, -h);
        Ok((self.at(s1, n1)? - self.at(s0, n0)?) / (2.0 * h))
    }

    fn second(&self, k: usize, l: usize) -> Result<DMatrix<f64>> {
        if k == 0 && l == 0 && self.nu == 0.5 {
            let s = self.scale;
            return Ok(offdiag_map(self.dist, |d| d * d * (-s * d).exp()));
        }
        let hk = FD_STEP2 * self.coord(k).abs().max(1.0);
        if k == l {
            let (s1, n1) = self.shifted(k, hk);
            let (s0, n0) = self.shifted(k, -hk);
            let mid = self.at(self.scale, self.nu)?;
            return Ok((self.at(s1, n1)? - mid * 2.0 + self.at(s0, n0)?) / (hk * hk));
        }
        let hl = FD_STEP2 * self.coord(l).abs().max(1.0);
        let pt = |a: f64, b: f64| -> Result<DMatrix<f64>> {
            let mut s = self.scale;
            let mut n = self.nu;
            if k == 0 {
                s += a;
                n += b;
            } else {
                n += a;
                s += b;
            }
            self.at(s, n)
        };
        Ok((pt(hk, hl)? - pt(hk, -hl)? - pt(-hk, hl)? + pt(-hk, -hl)?) / (4.0 * hk * hl))
    }
}

/// Matérn family `omega = (omega1, omega2, omega3)`: variance `omega1/(1-omega1)`, inverse range
/// `omega2`, smoothness `omega3` (held fixed by default).
#[derive(Debug, Clone, Copy, Default)]
pub struct Matern;

/// Matérn with smoothness fixed at 1/2: `D_ij = omega1/(1-omega1) exp(-omega2 d_ij)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Exponential;

/// `D = omega1 I`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScaledIdentity;

fn spatial_starts(with_nu: bool) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for w1 in [0.25, 0.5, 0.75] {
        for w2 in [0.5, 1.0, 2.0] {
            if with_nu {
                out.push(vec![w1, w2, 0.5]);
            } else {
                out.push(vec![w1, w2]);
            }
        }
    }
    out
}

/// Shared Matérn derivative assembly: `D = s(omega1) C(omega2, nu)`.
fn matern_d(
    w1: f64,
    dist: &DMatrix<f64>,
    scale: f64,
    nu: f64,
    j: usize,
) -> Result<DMatrix<f64>> {
    let (s, s1, _) = variance_factor(w1);
    let cd = CorrDerivs { dist, scale, nu };
    match j {
        0 => Ok(cd.at(scale, nu)? * s1),
        k => Ok(cd.first(k - 1)? * s),
    }
}

fn matern_d2(
    w1: f64,
    dist: &DMatrix<f64>,
    scale: f64,
    nu: f64,
    j1: usize,
    j2: usize,
) -> Result<DMatrix<f64>> {
    let (s, s1, s2) = variance_factor(w1);
    let cd = CorrDerivs { dist, scale, nu };
    match (j1, j2) {
        (0, 0) => Ok(cd.at(scale, nu)? * s2),
        (0, k) | (k, 0) => Ok(cd.first(k - 1)? * s1),
        (k, l) => Ok(cd.second(k - 1, l - 1)? * s),
    }
}

impl CovarianceModel for Matern {
    fn name(&self) -> &'static str {
        "matern"
    }

    fn param_names(&self) -> &'static [&'static str] {
        &["omega1", "omega2", "omega3"]
    }

    fn needs_distances(&self) -> bool {
        true
    }

    fn default_omega(&self) -> Vec<f64> {
        vec![0.5, 1.0, 0.5]
    }

    fn default_fixed(&self) -> Vec<bool> {
        vec![false, false, true]
    }

    fn default_starts(&self) -> Vec<Vec<f64>> {
        spatial_starts(true)
    }

    fn validate(&self, omega: &[f64]) -> Result<()> {
        check_len(omega, 3, self.name())?;
        check_open_unit("omega1", omega[0])?;
        check_positive("omega2", omega[1])?;
        check_positive("omega3", omega[2])
    }

    fn build(&self, omega: &[f64], geom: &Geometry) -> Result<DMatrix<f64>> {
        self.validate(omega)?;
        let (s, _, _) = variance_factor(omega[0]);
        Ok(corr_matrix(distances(geom)?, omega[1], omega[2])? * s)
    }

    fn d_build(&self, omega: &[f64], j: usize, geom: &Geometry) -> Result<DMatrix<f64>> {
        self.validate(omega)?;
        check_index(j, 3)?;
        matern_d(omega[0], distances(geom)?, omega[1], omega[2], j)
    }

    fn d2_build(
        &self,
        omega: &[f64],
        j1: usize,
        j2: usize,
        geom: &Geometry,
    ) -> Result<DMatrix<f64>> {
        self.validate(omega)?;
        check_index(j1, 3)?;
        check_index(j2, 3)?;
        matern_d2(omega[0], distances(geom)?, omega[1], omega[2], j1, j2)
    }
}

impl CovarianceModel for Exponential {
    fn name(&self) -> &'static str {
        "exponential"
    }

    fn param_names(&self) -> &'static [&'static str] {
        &["omega1", "omega2"]
    }

    fn needs_distances(&self) -> bool {
        true
    }

    fn default_omega(&self) -> Vec<f64> {
        vec![0.5, 1.0]
    }

    fn default_starts(&self) -> Vec<Vec<f64>> {
        spatial_starts(false)
    }

    fn validate(&self, omega: &[f64]) -> Result<()> {
        check_len(omega, 2, self.name())?;
        check_open_unit("omega1", omega[0])?;
        check_positive("omega2", omega[1])
    }

    fn build(&self, omega: &[f64], geom: &Geometry) -> Result<DMatrix<f64>> {
        self.validate(omega)?;
        let (s, _, _) = variance_factor(omega[0]);
        Ok(corr_matrix(distances(geom)?, omega[1], 0.5)? * s)
    }

    fn d_build(&self, omega: &[f64], j: usize, geom: &Geometry) -> Result<DMatrix<f64>> {
        self.validate(omega)?;
        check_index(j, 2)?;
        matern_d(omega[0], distances(geom)?, omega[1], 0.5, j)
    }

    fn d2_build(
        &self,
        omega: &[f64],
        j1: usize,
        j2: usize,
        geom: &Geometry,
    ) -> Result<DMatrix<f64>> {
        self.validate(omega)?;
        check_index(j1, 2)?;
        check_index(j2, 2)?;
        matern_d2(omega[0], distances(geom)?, omega[1], 0.5, j1, j2)
    }
}

impl CovarianceModel for ScaledIdentity {
    fn name(&self) -> &'static str {
        "scaled-identity"
    }

    fn param_names(&self) -> &'static [&'static str] {
        &["omega1"]
    }

    fn needs_distances(&self) -> bool {
        false
    }

    fn default_omega(&self) -> Vec<f64> {
        vec![1.0]
    }

    fn default_starts(&self) -> Vec<Vec<f64>> {
        vec![vec![0.25], vec![0.5], vec![1.0], vec![2.0]]
    }

    fn validate(&self, omega: &[f64]) -> Result<()> {
        check_len(omega, 1, self.name())?;
        check_positive("omega1", omega[0])
    }

    fn build(&self, omega: &[f64], geom: &Geometry) -> Result<DMatrix<f64>> {
        self.validate(omega)?;
        Ok(DMatrix::identity(geom.dim, geom.dim) * omega[0])
    }

    fn d_build(&self, omega: &[f64], j: usize, geom: &Geometry) -> Result<DMatrix<f64>> {
        self.validate(omega)?;
        check_index(j, 1)?;
        Ok(DMatrix::identity(geom.dim, geom.dim))
    }

    fn d2_build(
        &self,
        omega: &[f64],
        j1: usize,
        j2: usize,
        geom: &Geometry,
    ) -> Result<DMatrix<f64>> {
        self.validate(omega)?;
        check_index(j1, 1)?;
        check_index(j2, 1)?;
        Ok(DMatrix::zeros(geom.dim, geom.dim))
    }
}

fn check_index(j: usize, r: usize) -> Result<()> {
    if j < r {
        Ok(())
    } else {
        Err(GlmmError::invalid(format!("hyperparameter index {j} out of range (r = {r})")))
    }
}
