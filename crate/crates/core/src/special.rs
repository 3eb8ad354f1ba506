//! Special functions needed by the Dirichlet KL term and the implicit
//! reparameterisation of Gamma samples. All evaluated in `f64`.

use libm::{exp, fabs, log};

const EPS: f64 = 1e-16;
const MAX_ITER: usize = 10_000;

/// `ln Γ(x)` for `x > 0`.
#[inline]
pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

/// Digamma `ψ(x)` for `x > 0`.
pub fn digamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Asymptotic series with Bernoulli coefficients.
    let tail =
        inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0)))));
    acc + log(x) - 0.5 * inv - tail
}

/// Trigamma `ψ₁(x)` for `x > 0`.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let tail = inv
        + 0.5 * inv2
        + inv
            * inv2
            * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * 5.0 / 66.0))));
    acc + tail
}

/// Series expansion of the regularised lower incomplete gamma `P(a, x)`.
fn lower_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut del = 1.0 / a;
    let mut sum = del;
    for _ in 0..MAX_ITER {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if fabs(del) < fabs(sum) * EPS {
            break;
        }
    }
    sum * exp(-x + a * log(x) - ln_gamma(a))
}

/// Continued fraction (modified Lentz) for the regularised upper incomplete
/// gamma `Q(a, x)`; accurate for `x >= a + 1`.
fn upper_fraction(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if fabs(d) < TINY {
            d = TINY;
        }
        c = b + an / c;
        if fabs(c) < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if fabs(del - 1.0) < EPS {
            break;
        }
    }
    exp(-x + a * log(x) - ln_gamma(a)) * h
}

/// Regularised lower incomplete gamma `P(a, x) = γ(a, x) / Γ(a)`.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        lower_series(a, x)
    } else {
        1.0 - upper_fraction(a, x)
    }
}

/// Regularised upper incomplete gamma `Q(a, x) = 1 - P(a, x)`.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - lower_series(a, x)
    } else {
        upper_fraction(a, x)
    }
}

/// Log density of `Gamma(shape, 1)` at `x > 0`.
pub fn gamma_ln_pdf(shape: f64, x: f64) -> f64 {
    (shape - 1.0) * log(x) - x - ln_gamma(shape)
}

/// `∂P(a, x)/∂a` by a central difference in the shape, step `1e-4 * max(1, a)`.
///
/// The tail that is evaluated directly (lower series or upper fraction) is
/// the one differenced, so the result keeps relative precision in both tails.
pub fn gamma_p_da(a: f64, x: f64) -> f64 {
    let h = 1e-4 * if a > 1.0 { a } else { 1.0 };
    let h = h.min(0.5 * a);
    if x < a + 1.0 {
        (lower_series(a + h, x) - lower_series(a - h, x)) / (2.0 * h)
    } else {
        -(upper_fraction(a + h, x) - upper_fraction(a - h, x)) / (2.0 * h)
    }
}

/// Implicit reparameterisation derivative of a `Gamma(shape, 1)` sample:
/// `dx/da = -(∂F/∂a) / f(x; a)` with `F` the CDF and `f` the density.
pub fn gamma_sample_da(shape: f64, x: f64) -> f64 {
    let dfda = gamma_p_da(shape, x);
    -dfda / exp(gamma_ln_pdf(shape, x))
}
