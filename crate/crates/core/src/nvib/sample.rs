use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use super::{DpParams, DpParamsGrad, SampledMixture};
use crate::matrix::Matrix;
use crate::real::Real;
use crate::special::gamma_sample_da;
use crate::{Error, Result};

/// Quantities kept from [`sample_dp`] for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleCache<T> {
    /// Standard normal noise, `(n + 1) x p`.
    pub eps: Matrix<T>,
    /// Normalised weights `π`.
    pub pi: Vec<T>,
    /// `d log γ_i / d α_i` of each Gamma variate.
    pub dlog_gamma_dalpha: Vec<T>,
}

/// Draws one mixture from the DP: `π` as normalised `Gamma(α_i, 1)` variates
/// and one Gaussian sample per component.
///
/// Gamma variates are produced in log space. For `α < 1` the shape is boosted
/// to `α + 1` and multiplied by `U^{1/α}`, which keeps tiny variates
/// representable and gives a smooth derivative in `α`.
pub fn sample_dp<T: Real, R: Rng + ?Sized>(
    params: &DpParams<T>,
    rng: &mut R,
) -> Result<(SampledMixture<T>, SampleCache<T>)> {
    let k = params.alpha.len();
    let p = params.p();
    let mut log_gamma = Vec::with_capacity(k);
    let mut dlog = Vec::with_capacity(k);
    for (index, &a) in params.alpha.iter().enumerate() {
        let a = a.f64();
        if !(a > 0.0) || !a.is_finite() {
            return Err(Error::NonPositiveAlpha { index, value: a });
        }
        let (lg, d) = if a >= 1.0 {
            let x = draw_gamma(a, rng)?;
            (libm::log(x), gamma_sample_da(a, x) / x)
        } else {
            let x = draw_gamma(a + 1.0, rng)?;
            let ln_u = libm::log(1.0 - rng.random::<f64>());
            (
                libm::log(x) + ln_u / a,
                gamma_sample_da(a + 1.0, x) / x - ln_u / (a * a),
            )
        };
        log_gamma.push(lg);
        dlog.push(d);
    }
    let max = log_gamma.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + libm::log(log_gamma.iter().map(|&l| libm::exp(l - max)).sum::<f64>());
    let log_pi: Vec<T> = log_gamma.iter().map(|&l| T::c(l - lse)).collect();
    let pi: Vec<T> = log_gamma.iter().map(|&l| T::c(libm::exp(l - lse))).collect();

    let eps = Matrix::from_fn(k, p, |_, _| {
        let e: f64 = StandardNormal.sample(rng);
        T::c(e)
    });
    let z = Matrix::from_fn(k, p, |i, h| params.mu[(i, h)] + params.sigma[(i, h)] * eps[(i, h)]);

    let cache = SampleCache {
        eps,
        pi,
        dlog_gamma_dalpha: dlog.into_iter().map(T::c).collect(),
    };
    Ok((SampledMixture::new(z, log_pi), cache))
}

fn draw_gamma<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> Result<f64> {
    let dist = Gamma::new(shape, 1.0).map_err(|_| Error::GammaSampler { shape })?;
    let x: f64 = dist.sample(rng);
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(Error::GammaSampler { shape })
    }
}

/// Backward pass of [`sample_dp`]: reparameterised gradients for the
/// Gaussians and implicit reparameterisation gradients for the weights.
pub fn sample_dp_backward<T: Real>(
    params: &DpParams<T>,
    cache: &SampleCache<T>,
    d_z: &Matrix<T>,
    d_log_pi: &[T],
) -> DpParamsGrad<T> {
    let k = params.alpha.len();
    let total: T = d_log_pi.iter().copied().sum();
    let alpha = (0..k)
        .map(|i| (d_log_pi[i] - cache.pi[i] * total) * cache.dlog_gamma_dalpha[i])
        .collect();
    let sigma = d_z.zip_map(&cache.eps, |g, e| g * e);
    DpParamsGrad {
        alpha,
        log_alpha: alloc::vec![T::zero(); k - 1],
        mu: d_z.clone(),
        sigma,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(alpha: &[f64], p: usize) -> DpParams<f64> {
        let n = alpha.len();
        DpParams::with_prior(
            alpha.iter().map(|a| a.ln()).collect(),
            Matrix::zeros(n, p),
            Matrix::filled(n, p, 1.0),
        )
    }

    #[test]
    fn prior_only_has_unit_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mix, _) = sample_dp(&params(&[], 3), &mut rng).unwrap();
        assert_eq!(mix.log_pi.len(), 1);
        assert!(mix.log_pi[0].abs() < 1e-15);
    }

    #[test]
    fn weights_are_normalised() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let (mix, _) = sample_dp(&params(&[0.05, 0.7, 3.0, 12.0], 2), &mut rng).unwrap();
            let s: f64 = mix.log_pi.iter().map(|l| l.exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn non_positive_alpha_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut prm = params(&[1.0, 1.0], 2);
        prm.alpha[1] = 0.0;
        assert!(matches!(
            sample_dp(&prm, &mut rng),
            Err(Error::NonPositiveAlpha { index: 1, .. })
        ));
    }

    #[test]
    fn symmetric_alphas_have_symmetric_means() {
        // Data (c, c) plus prior 1 = c: three equal components.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let prm = params(&[1.0, 1.0], 1);
        let trials = 20_000;
        let mut m0 = 0.0;
        let mut m1 = 0.0;
        for _ in 0..trials {
            let (mix, _) = sample_dp(&prm, &mut rng).unwrap();
            m0 += mix.log_pi[0].exp();
            m1 += mix.log_pi[1].exp();
        }
        let (m0, m1) = (m0 / trials as f64, m1 / trials as f64);
        // Var of Beta(1, 2) is 1/18; SE ≈ 0.0017.
        assert!((m0 - 1.0 / 3.0).abs() < 0.01);
        assert!((m1 - 1.0 / 3.0).abs() < 0.01);
    }

    #[test]
    fn gaussian_samples_follow_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut prm = params(&[1.0], 1);
        prm.mu[(0, 0)] = 2.0;
        prm.sigma[(0, 0)] = 0.5;
        let trials = 20_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..trials {
            let (mix, _) = sample_dp(&prm, &mut rng).unwrap();
            let z = mix.z[(0, 0)];
            s += z;
            s2 += z * z;
        }
        let mean = s / trials as f64;
        let var = s2 / trials as f64 - mean * mean;
        assert!((mean - 2.0).abs() < 4.0 * 0.5 / (trials as f64).sqrt());
        assert!((var - 0.25).abs() < 0.02);
    }
}
