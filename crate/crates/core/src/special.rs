//! Special functions used by the realized-measure and pricing code.

use statrs::function::gamma::ln_gamma;

const REL_TOL: f64 = 1e-15;
const MAX_ITER: usize = 10_000;

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile.
pub fn norm_ppf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile level must lie in (0, 1)");
    let mut x = -std::f64::consts::SQRT_2 * statrs::function::erf::erfc_inv(2.0 * p);
    // Newton polish against the accurate CDF
    for _ in 0..2 {
        let pdf = norm_pdf(x);
        if pdf <= 0.0 {
            break;
        }
        x -= (norm_cdf(x) - p) / pdf;
    }
    x
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Upper incomplete gamma function Γ(a, x) = ∫ₓ^∞ t^{a-1} e^{-t} dt (not regularized).
///
/// Series for the lower function when `x < a + 1`, modified Lentz continued
/// fraction otherwise.
pub fn upper_incomplete_gamma(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0, "upper_incomplete_gamma needs a > 0, x >= 0");
    let ln_ga = ln_gamma(a);
    if x == 0.0 {
        return ln_ga.exp();
    }
    if x < a + 1.0 {
        let lower_reg = lower_series(a, x, ln_ga);
        ln_ga.exp() * (1.0 - lower_reg)
    } else {
        upper_continued_fraction(a, x, ln_ga) * ln_ga.exp()
    }
}

// Regularized lower incomplete gamma P(a, x) by series.
fn lower_series(a: f64, x: f64, ln_ga: f64) -> f64 {
    let mut ap = a;
    let mut term = 1.0 / a;
    let mut sum = term;
    for _ in 0..MAX_ITER {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * REL_TOL {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_ga).exp()
}

// Regularized upper incomplete gamma Q(a, x) by continued fraction.
fn upper_continued_fraction(a: f64, x: f64, ln_ga: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < REL_TOL {
            break;
        }
    }
    (-x + a * x.ln() - ln_ga).exp() * h
}

/// E|Z|^p for a standard normal Z: 2^{p/2} Γ((p+1)/2) / √π.
pub fn abs_normal_moment(p: f64) -> f64 {
    (0.5 * p * std::f64::consts::LN_2 + ln_gamma(0.5 * (p + 1.0))).exp() / std::f64::consts::PI.sqrt()
}
