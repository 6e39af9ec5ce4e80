//! Modified Bessel function of the second kind, `K_nu(x)`, for real order `nu > 0`.
//!
//! Half-integer orders use the closed form `K_{1/2}(x) = sqrt(pi/(2x)) e^{-x}` followed by upward
//! recurrence. Other orders reduce `nu = mu + k` with `|mu| <= 1/2`, evaluate `K_mu` and
//! `K_{mu+1}` by Temme's series (`x <= 2`) or Steed's continued fraction (`x > 2`), then recur
//! upward in the order.

use std::f64::consts::PI;

use crate::error::{GlmmError, Result};

const EPS: f64 = 1e-16;
const MAX_TERMS: usize = 10_000;

/// Taylor coefficients of `1/Gamma(z) = sum_k c_k z^k`, `k = 1..=26`.
const RGAMMA_TAYLOR: [f64; 26] = [
    1.0,
    0.577_215_664_901_532_860_6,
    -0.655_878_071_520_253_881_1,
    -0.042_002_635_034_095_235_53,
    0.166_538_611_382_291_489_5,
    -0.042_197_734_555_544_336_75,
    -0.009_621_971_527_876_973_562,
    0.007_218_943_246_663_099_542,
    -0.001_165_167_591_859_065_112,
    -0.000_215_241_674_114_950_972_8,
    0.000_128_050_282_388_116_186_2,
    -0.000_020_134_854_780_788_238_66,
    -1.250_493_482_142_670_657e-6,
    1.133_027_231_981_695_882e-6,
    -2.056_338_416_977_607_104e-7,
    6.116_095_104_481_415_818e-9,
    5.002_007_644_469_222_930e-9,
    -1.181_274_570_487_020_145e-9,
    1.043_426_711_691_100_511e-10,
    7.782_263_439_905_071_254e-12,
    -3.696_805_618_642_205_708e-12,
    5.100_370_287_454_475_979e-13,
    -2.058_326_053_566_506_783e-14,
    -5.348_122_539_423_017_982e-15,
    1.226_778_628_238_260_790e-15,
    -1.181_259_301_697_458_770e-16,
];

/// `(gam1, gam2, 1/Gamma(1+mu), 1/Gamma(1-mu))` for `|mu| <= 1/2`, where
/// `gam1 = (1/Gamma(1-mu) - 1/Gamma(1+mu)) / (2 mu)` and `gam2 = (1/Gamma(1-mu) + 1/Gamma(1+mu)) / 2`.
fn temme_gammas(mu: f64) -> (f64, f64, f64, f64) {
    // 1/Gamma(1+mu) = sum_k c_k mu^{k-1}
    let mut gam1 = 0.0;
    let mut gam2 = 0.0;
    for (idx, c) in RGAMMA_TAYLOR.iter().enumerate().rev() {
        let k = idx + 1;
        if k % 2 == 0 {
            // even k contributes mu^{k-2} to gam1 with a minus sign
            gam1 = gam1 * mu * mu - c;
        } else {
            gam2 = gam2 * mu * mu + c;
        }
    }
    // the Horner passes above accumulate in mu^2, starting from the top coefficient of each parity
    let gampl = gam2 - mu * gam1;
    let gammi = gam2 + mu * gam1;
    (gam1, gam2, gampl, gammi)
}

/// `(K_mu(x), K_{mu+1}(x))` by Temme's series, `x <= 2`.
fn temme(mu: f64, x: f64) -> (f64, f64) {
    let x2 = 0.5 * x;
    let pimu = PI * mu;
    let fact = if pimu.abs() < EPS { 1.0 } else { pimu / pimu.sin() };
    let d = -x2.ln();
    let e = mu * d;
    let fact2 = if e.abs() < EPS { 1.0 } else { e.sinh() / e };
    let (gam1, gam2, gampl, gammi) = temme_gammas(mu);
    let mut ff = fact * (gam1 * e.cosh() + gam2 * fact2 * d);
    let mut sum = ff;
    let ee = e.exp();
    let mut p = 0.5 * ee / gampl;
    let mut q = 0.5 / (ee * gammi);
    let mut c = 1.0;
    let dd = x2 * x2;
    let mut sum1 = p;
    for i in 1..MAX_TERMS {
        let fi = i as f64;
        ff = (fi * ff + p + q) / (fi * fi - mu * mu);
        c *= dd / fi;
        p /= fi - mu;
        q /= fi + mu;
        let del = c * ff;
        sum += del;
        let del1 = c * (p - fi * ff);
        sum1 += del1;
        if del.abs() < sum.abs() * EPS {
            break;
        }
    }
    (sum, sum1 * 2.0 / x)
}

/// `(e^x K_mu(x), e^x K_{mu+1}(x))` by Steed's continued fraction, `x > 2`.
fn steed_scaled(mu: f64, x: f64) -> (f64, f64) {
    let mut b = 2.0 * (1.0 + x);
    let mut d = 1.0 / b;
    let mut h = d;
    let mut delh = d;
    let mut q1 = 0.0;
    let mut q2 = 1.0;
    let a1 = 0.25 - mu * mu;
    let mut q = a1;
    let mut c = a1;
    let mut a = -a1;
    let mut s = 1.0 + q * delh;
    for i in 1..MAX_TERMS {
        let fi = i as f64;
        a -= 2.0 * fi;
        c = -a * c / (fi + 1.0);
        let qnew = (q1 - b * q2) / a;
        q1 = q2;
        q2 = qnew;
        q += c * qnew;
        b += 2.0;
        d = 1.0 / (b + a * d);
        delh = (b * d - 1.0) * delh;
        h += delh;
        let dels = q * delh;
        s += dels;
        if (dels / s).abs() < EPS {
            break;
        }
    }
    let h = a1 * h;
    let kmu = (PI / (2.0 * x)).sqrt() / s;
    let k1 = kmu * (mu + x + 0.5 - h) / x;
    (kmu, k1)
}

fn is_half_integer(nu: f64) -> bool {
    let twice = 2.0 * nu;
    twice.fract() == 0.0 && (twice as i64) % 2 == 1
}

/// `e^x K_nu(x)`; stays representable where `K_nu(x)` itself underflows.
pub fn bessel_k_scaled(nu: f64, x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(GlmmError::domain(format!("bessel_K requires x > 0, got {x}")));
    }
    if !(nu > 0.0) || !nu.is_finite() {
        return Err(GlmmError::domain(format!("bessel_K requires nu > 0, got {nu}")));
    }
    if is_half_integer(nu) {
        let mut k_prev = (PI / (2.0 * x)).sqrt();
        let mut k_cur = k_prev * (1.0 + 1.0 / x);
        let mut order = 0.5;
        if nu == 0.5 {
            return Ok(k_prev);
        }
        order += 1.0;
        while order < nu {
            let next = k_prev + 2.0 * order / x * k_cur;
            k_prev = k_cur;
            k_cur = next;
            order += 1.0;
        }
        return Ok(k_cur);
    }
    let nl = (nu + 0.5).floor();
    let mu = nu - nl;
    let (mut kmu, mut k1) = if x <= 2.0 {
        let (a, b) = temme(mu, x);
        let s = x.exp();
        (a * s, b * s)
    } else {
        steed_scaled(mu, x)
    };
    for i in 1..=(nl as usize) {
        let next = (mu + i as f64) * 2.0 / x * k1 + kmu;
        kmu = k1;
        k1 = next;
    }
    Ok(kmu)
}

/// Modified Bessel function of the second kind `K_nu(x)`, `nu > 0`, `x > 0`.
pub fn bessel_k(nu: f64, x: f64) -> Result<f64> {
    Ok(bessel_k_scaled(nu, x)? * (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn half_integer_examples() {
        assert!((bessel_k(0.5, 1.0).unwrap() - 0.461_068).abs() < 1e-6);
        assert!((bessel_k(0.5, 2.0).unwrap() - 0.119_938).abs() < 1e-6);
        assert!((bessel_k(1.5, 1.0).unwrap() - 0.922_137).abs() < 1e-6);
        let x: f64 = 3.7;
        let closed = (PI / (2.0 * x)).sqrt() * (-x).exp() * (1.0 + 3.0 / x + 3.0 / (x * x));
        assert!(rel(bessel_k(2.5, x).unwrap(), closed) < 1e-14);
    }

    #[test]
    fn temme_gammas_match_gamma_function() {
        for mu in [-0.5, -0.3, -1e-9, 0.0, 1e-7, 0.2, 0.49, 0.5] {
            let (_, _, gampl, gammi) = temme_gammas(mu);
            let g_pl = 1.0 / statrs::function::gamma::gamma(1.0 + mu);
            let g_mi = 1.0 / statrs::function::gamma::gamma(1.0 - mu);
            assert!((gampl - g_pl).abs() < 1e-14, "mu={mu}");
            assert!((gammi - g_mi).abs() < 1e-14, "mu={mu}");
        }
    }

    #[test]
    fn rejects_nonpositive_argument() {
        assert!(bessel_k(0.5, 0.0).is_err());
        assert!(bessel_k(0.5, -1.0).is_err());
        assert!(bessel_k(0.0, 1.0).is_err());
    }

    #[test]
    fn branches_agree_at_crossover() {
        for nu in [0.1, 0.3, 0.7, 1.2, 2.9, 4.6] {
            let below = bessel_k(nu, 2.0).unwrap();
            let above = bessel_k(nu, 2.0 + 1e-12).unwrap();
            assert!(rel(below, above) < 1e-11, "nu={nu}");
        }
    }

    #[test]
    fn general_orders_match_reference_table() {
        // values from an arbitrary-precision implementation
        let table = [
            (0.1, 0.05, 3.186_742_227_714_112_3),
            (0.1, 1.9, 0.129_125_267_807_295_4),
            (0.1, 50.0, 3.410_505_444_604_728e-23),
            (0.3, 0.5, 0.976_474_124_381_787_9),
            (0.7, 2.5, 0.067_777_989_857_574_63),
            (1.2, 0.05, 38.311_889_436_341_75),
            (1.2, 10.0, 1.904_394_919_838_336_4e-5),
            (2.9, 0.5, 49.284_163_947_844_43),
            (2.9, 1.9, 0.702_114_837_845_415_2),
            (4.6, 0.05, 156_627_644.777_434_5),
            (4.6, 2.5, 1.597_682_166_141_976_6),
            (4.6, 50.0, 4.204_475_118_290_644e-23),
        ];
        for (nu, x, want) in table {
            let got = bessel_k(nu, x).unwrap();
            assert!(rel(got, want) < 1e-13, "nu={nu} x={x} got={got} want={want}");
        }
    }
}
