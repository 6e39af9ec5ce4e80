mod common;

use pmglmm::io::{read_fit, write_fit, FitReport};
use pmglmm::solver::{fit, SolverConfig};
use serde_json::Value;

use common::instance;

#[test]
fn fit_report_round_trips_bitwise() {
    let inst = instance(8, "poisson", "scaled-identity", 8, 2);
    let f = fit(&inst.data, inst.family.as_ref(), &inst.cov, &SolverConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fit.json");
    write_fit(&f, &path).unwrap();
    let back = read_fit(&path).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back.beta), bits(&f.beta));
    assert_eq!(bits(&back.omega), bits(&f.omega));
    assert_eq!(bits(&back.se), bits(&f.se));
    assert_eq!(bits(&back.gammahat), bits(&f.gammahat));
    assert_eq!(back.psi0.to_bits(), f.psi0.to_bits());
    assert_eq!(back.hess, f.hess);
    assert_eq!(FitReport::from(&back), FitReport::from(&f));
}

#[test]
fn report_carries_documented_fields() {
    let inst = instance(4, "poisson", "scaled-identity", 12, 3);
    let cfg = SolverConfig {
        max_outer: 1,
        ..SolverConfig::default()
    };
    let f = fit(&inst.data, inst.family.as_ref(), &inst.cov, &cfg).unwrap();
    let v: Value = serde_json::to_value(FitReport::from(&f)).unwrap();
    for key in ["estimates", "se", "psi0", "grad_norm", "converged", "iterations", "warnings"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert!(v["estimates"]["beta"].is_array() && v["estimates"]["omega"].is_array());
    assert_eq!(v["converged"], Value::Bool(false));
    assert!(!v["warnings"].as_array().unwrap().is_empty());
}
