//! Scalar special functions. `erfc` comes from `libm` (musl port, close to
//! correctly rounded); the rest wraps `statrs`.

use libm::erfc;
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::erfc_inv;
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma as statrs_ln_gamma};
use std::f64::consts::{FRAC_1_SQRT_2, LN_2, PI, SQRT_2};

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn norm_cdf(x: f64) -> f64 {
    if x == f64::INFINITY {
        return 1.0;
    }
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Upper tail `1 - Phi(x)`, accurate for large positive `x`.
pub fn norm_sf(x: f64) -> f64 {
    norm_cdf(-x)
}

/// `Phi(b) - Phi(a)` without cancellation when both lie in the same tail.
pub fn norm_interval(a: f64, b: f64) -> f64 {
    if !(b > a) {
        return 0.0;
    }
    if a > 0.0 {
        norm_sf(a) - norm_sf(b)
    } else {
        norm_cdf(b) - norm_cdf(a)
    }
}

pub fn norm_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    -SQRT_2 * erfc_inv(2.0 * p)
}

pub fn ln_gamma(x: f64) -> f64 {
    statrs_ln_gamma(x)
}

/// Log density of `sqrt(chi2_d / d)` at `s > 0`.
pub fn ln_scaled_chi_density(d: f64, s: f64) -> f64 {
    if s <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let ds2 = d * s * s;
    (2.0 * d * s).ln() + (0.5 * d - 1.0) * ds2.ln() - 0.5 * ds2 - 0.5 * d * LN_2 - ln_gamma(0.5 * d)
}

/// Quantile of `sqrt(chi2_d / d)` by bisection on `log x` against the
/// regularized incomplete gamma function of the relevant tail.
pub fn scaled_chi_quantile(d: f64, p: f64) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let a = 0.5 * d;
    // g(x) > 0 iff the quantile lies below x
    let g = |x: f64| {
        if p < 0.5 {
            gamma_lr(a, 0.5 * x) - p
        } else {
            (1.0 - p) - gamma_ur(a, 0.5 * x)
        }
    };
    let (mut lo, mut hi) = (d.ln() - 2.0, d.ln() + 2.0);
    while g(lo.exp()) > 0.0 {
        lo -= 2.0 * (hi - lo);
    }
    while g(hi.exp()) < 0.0 {
        hi += 2.0 * (hi - lo);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid.exp()) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-14 {
            break;
        }
    }
    (0.5 * (lo + hi)).exp().sqrt() / d.sqrt()
}

pub fn student_t_cdf(df: f64, x: f64) -> f64 {
    StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom").cdf(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn normal_reference_values() {
        assert_relative_eq!(norm_cdf(1.96), 0.9750021048517795, epsilon = 1e-15);
        assert_relative_eq!(norm_sf(10.0), 7.619853024160527e-24, max_relative = 1e-12);
        assert_relative_eq!(norm_quantile(0.975), 1.959963984540054, epsilon = 1e-13);
        assert_relative_eq!(norm_interval(8.0, 9.0), 6.220960574271785e-16, max_relative = 1e-10);
    }

    #[test]
    fn scaled_chi_quantiles() {
        // chi2_1 lower tail: P(chi2_1 < x) ~ sqrt(2x/pi)
        let q = scaled_chi_quantile(1.0, 1e-12);
        assert_relative_eq!(q * q, std::f64::consts::PI / 2.0 * 1e-24, max_relative = 1e-6);
        // chi2_4 has closed-form c.d.f. 1 - exp(-x/2)(1 + x/2)
        for &p in &[1e-10, 0.3, 0.5, 0.999, 1.0 - 1e-10] {
            let x = 4.0 * scaled_chi_quantile(4.0, p).powi(2);
            let tail = (-x / 2.0).exp() * (1.0 + x / 2.0);
            assert_relative_eq!(tail, 1.0 - p, max_relative = 1e-9);
        }
    }

    #[test]
    fn scaled_chi_density_integrates_to_one() {
        for &d in &[1.0, 3.0, 17.0, 500.0] {
            let lo = scaled_chi_quantile(d, 1e-12);
            let hi = scaled_chi_quantile(d, 1.0 - 1e-12);
            let m = 20000;
            let h = (hi - lo) / m as f64;
            let mut acc = 0.0;
            for i in 0..m {
                let s = lo + (i as f64 + 0.5) * h;
                acc += ln_scaled_chi_density(d, s).exp() * h;
            }
            assert!((acc - 1.0).abs() < 1e-6, "d={d} lo={lo} hi={hi} acc={acc}");
        }
    }
}
