#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use pmglmm::covariance::{CovarianceSpec, Geometry};
use pmglmm::data::{distance_matrix, incidence, GlmmData};
use pmglmm::family::ExponentialFamily;
use pmglmm::registry;
use pmglmm::simulate::{gen_response, gen_sites, sample_gp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct Instance {
    pub data: GlmmData,
    pub family: Arc<dyn ExponentialFamily>,
    pub cov: CovarianceSpec,
    pub label: String,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

/// Small grouped problem: `n` observations spread over `d` random effects, an intercept and one
/// standard-normal covariate. Matérn effects sit at random sites in a 4 by 4 square.
pub fn instance(seed: u64, family: &str, kind: &str, n: usize, d: usize) -> Instance {
    let mut r = rng(seed);
    let fam = registry::families().get(family).unwrap();
    let model = registry::covariances().get(kind).unwrap();
    let groups: Vec<usize> = (0..n).map(|i| i % d).collect();
    let z = incidence(&groups, d);
    let sites = model.needs_distances().then(|| gen_sites(d, 4.0, &mut r));
    let geometry = Geometry {
        dim: d,
        distances: sites.as_deref().map(distance_matrix),
    };
    let omega = match kind {
        "scaled-identity" => vec![1.0],
        "exponential" => vec![0.5, 1.0],
        _ => vec![0.5, 1.0, 0.5],
    };
    let fixed = model.default_fixed();
    let truth = CovarianceSpec::new(Arc::clone(&model), omega, fixed, geometry, 0.0).unwrap();
    let gamma = sample_gp(&truth.build_d().unwrap(), &mut r).unwrap();
    let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { normal(&mut r) });
    let (beta, trials) = if family == "binomial" {
        (DVector::from_vec(vec![-0.2, 0.6]), Some(DVector::from_element(n, 4.0)))
    } else {
        (DVector::from_vec(vec![0.5, 0.4]), None)
    };
    let eta = &x * &beta + &z * &gamma;
    let y = gen_response(fam.as_ref(), &eta, trials.as_ref(), &mut r).unwrap();
    let data = GlmmData::new(y, trials, x, z, sites).unwrap();
    Instance {
        data,
        family: fam,
        cov: truth,
        label: format!("{family}/{kind} n={n} d={d} seed={seed}"),
    }
}

/// Fixed-effects maximum likelihood by Newton's method on the GLM log-likelihood, with the
/// cumulant derivatives written out here rather than taken from the family implementations.
pub fn glm_irls(data: &GlmmData, family: &str) -> DVector<f64> {
    let n = data.n();
    let p = data.p();
    let mut beta = DVector::zeros(p);
    for _ in 0..200 {
        let eta = &data.x * &beta;
        let mut score = DVector::zeros(p);
        let mut info = DMatrix::zeros(p, p);
        for i in 0..n {
            let (mean, var) = match family {
                "poisson" => (eta[i].exp(), eta[i].exp()),
                _ => {
                    let m = data.trials.as_ref().unwrap()[i];
                    let pr = 1.0 / (1.0 + (-eta[i]).exp());
                    (m * pr, m * pr * (1.0 - pr))
                }
            };
            let xi = data.x.row(i).transpose();
            score += &xi * (data.y[i] - mean);
            info += &xi * xi.transpose() * var;
        }
        let step = info.lu().solve(&score).unwrap();
        beta += &step;
        if step.amax() < 1e-14 {
            break;
        }
    }
    beta
}

pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-12)
}
