use alloc::vec;
use alloc::vec::Vec;

use super::DpParams;
use crate::matrix::Matrix;
use crate::real::Real;
use crate::special::{digamma, ln_gamma, trigamma};
use crate::{Error, Result};

/// Dirichlet KL term on total pseudo-counts.
///
/// `KL(Ga(α_q0, 1) ‖ Ga(α_p0', 1)) = lnΓ(α_p0') − lnΓ(α_q0) + (α_q0 − α_p0') ψ(α_q0)`
/// where `α_q0` is the layer's total pseudo-count and `α_p0'` the
/// length-conditioned prior total.
pub fn kl_dirichlet<T: Real>(alpha_q0: T, alpha_p0_prime: T) -> Result<T> {
    let (a, b) = check_positive(alpha_q0, alpha_p0_prime)?;
    Ok(T::c(ln_gamma(b) - ln_gamma(a) + (a - b) * digamma(a)))
}

/// `(∂/∂α_q0, ∂/∂α_p0')` of [`kl_dirichlet`].
pub fn kl_dirichlet_grad<T: Real>(alpha_q0: T, alpha_p0_prime: T) -> Result<(T, T)> {
    let (a, b) = check_positive(alpha_q0, alpha_p0_prime)?;
    Ok((T::c((a - b) * trigamma(a)), T::c(digamma(b) - digamma(a))))
}

fn check_positive<T: Real>(a: T, b: T) -> Result<(f64, f64)> {
    let (a, b) = (a.f64(), b.f64());
    for v in [a, b] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::NonPositiveArgument(v));
        }
    }
    Ok((a, b))
}

/// Gaussian KL term against the standard normal prior, weighted by
/// normalised pseudo-counts:
/// `½ Σ_i (α_i/α_0) Σ_h (μ_ih² − 1 + σ_ih² − ln σ_ih²)`.
///
/// Rows with `α_i = 0` contribute nothing. Takes raw slices so that any set
/// of components can be scored; see [`DpParams`] for the usual layout.
pub fn kl_gaussian<T: Real>(alpha: &[T], mu: &Matrix<T>, sigma: &Matrix<T>) -> T {
    let alpha0: T = alpha.iter().copied().sum();
    if alpha0 <= T::zero() {
        return T::zero();
    }
    let half = T::c(0.5);
    let mut total = T::zero();
    for (i, &a) in alpha.iter().enumerate() {
        if a == T::zero() {
            continue;
        }
        total += a / alpha0 * row_term(mu.row(i), sigma.row(i));
    }
    half * total
}

fn row_term<T: Real>(mu: &[T], sigma: &[T]) -> T {
    mu.iter()
        .zip(sigma)
        .map(|(&m, &s)| {
            let s2 = s * s;
            m * m - T::one() + s2 - s2.ln()
        })
        .sum()
}

/// Gradients of [`kl_gaussian`].
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianKlGrads<T> {
    pub alpha: Vec<T>,
    pub mu: Matrix<T>,
    pub sigma: Matrix<T>,
}

pub fn kl_gaussian_grad<T: Real>(alpha: &[T], mu: &Matrix<T>, sigma: &Matrix<T>) -> GaussianKlGrads<T> {
    let k = alpha.len();
    let p = mu.cols();
    let alpha0: T = alpha.iter().copied().sum();
    let mut g = GaussianKlGrads {
        alpha: vec![T::zero(); k],
        mu: Matrix::zeros(k, p),
        sigma: Matrix::zeros(k, p),
    };
    if alpha0 <= T::zero() {
        return g;
    }
    let half = T::c(0.5);
    let kl = kl_gaussian(alpha, mu, sigma);
    for i in 0..k {
        let t = row_term(mu.row(i), sigma.row(i));
        g.alpha[i] = half * t / alpha0 - kl / alpha0;
        if alpha[i] == T::zero() {
            continue;
        }
        let w = alpha[i] / alpha0;
        for h in 0..p {
            let s = sigma[(i, h)];
            g.mu[(i, h)] = w * mu[(i, h)];
            g.sigma[(i, h)] = w * (s - T::one() / s);
        }
    }
    g
}

impl<T: Real> DpParams<T> {
    /// Gaussian KL over all retained components of this layer.
    pub fn kl_gaussian(&self) -> T {
        let alpha: Vec<T> = self
            .alpha
            .iter()
            .zip(&self.retained)
            .map(|(&a, &r)| if r { a } else { T::zero() })
            .collect();
        kl_gaussian(&alpha, &self.mu, &self.sigma)
    }
}
