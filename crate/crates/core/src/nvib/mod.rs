//! Nonparametric variational information bottleneck kernels.
//!
//! Every differentiable kernel comes as a forward function plus an explicit
//! backward function that maps output gradients to input gradients. The
//! autodiff tape wraps these pairs as single operations, and
//! [`crate::gradcheck`] certifies them against central finite differences.
//!
//! A layer's Dirichlet process is described by [`DpParams`]: `n` data
//! components projected from the input vectors plus one trailing prior
//! component with pseudo-count 1, mean 0 and unit standard deviation.

mod attention;
mod kl;
mod project;
mod sample;

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::matrix::Matrix;
use crate::real::Real;

pub use attention::{
    denoising_attention_test, denoising_attention_test_backward, denoising_attention_train,
    denoising_attention_train_backward, AttentionOutput, TestAttentionGrads, TrainAttentionGrads,
};
pub use kl::{kl_dirichlet, kl_dirichlet_grad, kl_gaussian, kl_gaussian_grad, GaussianKlGrads};
pub use project::{project_dp_params, project_dp_params_backward, ProjectionGrads};
pub use sample::{sample_dp, sample_dp_backward, SampleCache};

/// Pruning threshold on pseudo-counts used at test time and for the
/// encoder-decoder bottleneck.
pub const DEFAULT_ALPHA_THRESHOLD: f64 = 0.1;

/// Parameters of one layer's Dirichlet process.
#[derive(Clone, Debug, PartialEq)]
pub struct DpParams<T> {
    /// Pseudo-counts, length `n + 1`; the last entry is the prior.
    pub alpha: Vec<T>,
    /// Pre-threshold log pseudo-counts of the `n` data components, fed to
    /// the next layer's multiplicative skip connection.
    pub log_alpha: Vec<T>,
    /// Component means, `(n + 1) x p`.
    pub mu: Matrix<T>,
    /// Component standard deviations, `(n + 1) x p`.
    pub sigma: Matrix<T>,
    /// `false` for components removed by thresholding. The prior is always kept.
    pub retained: Vec<bool>,
}

impl<T: Real> DpParams<T> {
    /// Builds parameters from data components and appends the prior component.
    pub fn with_prior(log_alpha: Vec<T>, mu: Matrix<T>, sigma: Matrix<T>) -> Self {
        let n = log_alpha.len();
        assert_eq!(mu.rows(), n);
        assert_eq!(sigma.shape(), mu.shape());
        let p = mu.cols();
        let mut alpha: Vec<T> = log_alpha.iter().map(|&l| l.exp()).collect();
        alpha.push(T::one());
        let mu = mu.vstack(&Matrix::zeros(1, p));
        let sigma = sigma.vstack(&Matrix::filled(1, p, T::one()));
        Self {
            alpha,
            log_alpha,
            mu,
            sigma,
            retained: vec![true; n + 1],
        }
    }

    /// Number of data components (excluding the prior).
    #[inline]
    pub fn n(&self) -> usize {
        self.alpha.len() - 1
    }

    /// Model width.
    #[inline]
    pub fn p(&self) -> usize {
        self.mu.cols()
    }

    /// Total pseudo-count over retained components, prior included.
    pub fn alpha0(&self) -> T {
        self.alpha
            .iter()
            .zip(&self.retained)
            .filter(|(_, &r)| r)
            .map(|(&a, _)| a)
            .sum()
    }

    /// Retained flags of the `n` data components.
    pub fn data_mask(&self) -> &[bool] {
        &self.retained[..self.n()]
    }
}

/// One sample from a layer's Dirichlet process (a single draw per component).
#[derive(Clone, Debug, PartialEq)]
pub struct SampledMixture<T> {
    /// One Gaussian sample per component, `(n + 1) x p`.
    pub z: Matrix<T>,
    /// Log Dirichlet weights, length `n + 1`.
    pub log_pi: Vec<T>,
    /// `false` marks a component with `log π = -∞` (excluded from attention).
    pub active: Vec<bool>,
}

impl<T: Real> SampledMixture<T> {
    pub fn new(z: Matrix<T>, log_pi: Vec<T>) -> Self {
        let active = vec![true; log_pi.len()];
        Self { z, log_pi, active }
    }
}

/// Learned maps from input vectors to DP parameters, plus the query/key maps
/// of denoising self-attention.
#[derive(Clone, Debug, PartialEq)]
pub struct NvibProjection<T> {
    /// Pseudo-count head, length `p`.
    pub w_alpha: Vec<T>,
    pub b_alpha: T,
    /// Mean head, `p x p`.
    pub w_mu: Matrix<T>,
    pub b_mu: Vec<T>,
    /// Log standard deviation head, `p x p`; exponentiated.
    pub w_sigma: Matrix<T>,
    pub b_sigma: Vec<T>,
    /// Query map, `p x d`.
    pub w_q: Matrix<T>,
    /// Key map, `p x d`.
    pub w_k: Matrix<T>,
}

impl<T: Real> NvibProjection<T> {
    pub fn p(&self) -> usize {
        self.w_mu.rows()
    }

    pub fn d(&self) -> usize {
        self.w_q.cols()
    }

    /// Random projection with entries drawn from `N(0, scale²)`.
    pub fn random<R: Rng + ?Sized>(p: usize, d: usize, scale: f64, rng: &mut R) -> Self {
        let draw = |r: &mut R| {
            let x: f64 = StandardNormal.sample(r);
            T::c(scale * x)
        };
        let w_alpha = (0..p).map(|_| draw(rng)).collect();
        let b_alpha = draw(rng);
        let w_mu = Matrix::from_fn(p, p, |_, _| draw(rng));
        let b_mu = (0..p).map(|_| draw(rng)).collect();
        let w_sigma = Matrix::from_fn(p, p, |_, _| draw(rng));
        let b_sigma = (0..p).map(|_| draw(rng)).collect();
        let w_q = Matrix::from_fn(p, d, |_, _| draw(rng));
        let w_k = Matrix::from_fn(p, d, |_, _| draw(rng));
        Self {
            w_alpha,
            b_alpha,
            w_mu,
            b_mu,
            w_sigma,
            b_sigma,
            w_q,
            w_k,
        }
    }

    /// `u = queries_raw · W^Q · (W^K)^T`.
    pub fn project_queries(&self, queries_raw: &Matrix<T>) -> Matrix<T> {
        queries_raw.matmul(&self.w_q).matmul_nt(&self.w_k)
    }
}

/// Gradient of a scalar objective with respect to the fields of [`DpParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct DpParamsGrad<T> {
    pub alpha: Vec<T>,
    pub log_alpha: Vec<T>,
    pub mu: Matrix<T>,
    pub sigma: Matrix<T>,
}

impl<T: Real> DpParamsGrad<T> {
    pub fn zeros(n: usize, p: usize) -> Self {
        Self {
            alpha: vec![T::zero(); n + 1],
            log_alpha: vec![T::zero(); n],
            mu: Matrix::zeros(n + 1, p),
            sigma: Matrix::zeros(n + 1, p),
        }
    }

    pub fn accumulate(&mut self, other: &Self) {
        for (a, &b) in self.alpha.iter_mut().zip(&other.alpha) {
            *a += b;
        }
        for (a, &b) in self.log_alpha.iter_mut().zip(&other.log_alpha) {
            *a += b;
        }
        self.mu.add_assign(&other.mu);
        self.sigma.add_assign(&other.sigma);
    }
}

/// Zeroes data pseudo-counts at or below `threshold`.
///
/// Returns the thresholded parameters and the retained mask of the `n` data
/// components. The prior component is never dropped. `log_alpha` keeps the
/// raw values so the skip connection of the next layer is unaffected.
pub fn threshold_alpha<T: Real>(params: &DpParams<T>, threshold: T) -> (DpParams<T>, Vec<bool>) {
    let mut out = params.clone();
    let n = out.n();
    for i in 0..n {
        if out.alpha[i] <= threshold {
            out.alpha[i] = T::zero();
            out.retained[i] = false;
        }
    }
    let mask = out.retained[..n].to_vec();
    (out, mask)
}

/// Softmax over the `true` entries of `mask`; masked entries get exactly 0.
pub(crate) fn masked_softmax<T: Real>(logits: &mut [T], mask: &[bool]) -> crate::Result<()> {
    let mut max = T::neg_infinity();
    for (&l, &m) in logits.iter().zip(mask) {
        if m && l > max {
            max = l;
        }
    }
    if max == T::neg_infinity() {
        return Err(crate::Error::DegenerateMixture);
    }
    let mut total = T::zero();
    for (l, &m) in logits.iter_mut().zip(mask) {
        if m {
            *l = (*l - max).exp();
            total += *l;
        } else {
            *l = T::zero();
        }
    }
    for l in logits.iter_mut() {
        *l /= total;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prior_component_is_unit() {
        let p = DpParams::with_prior(vec![0.3f64, -0.2], Matrix::filled(2, 3, 0.5), Matrix::filled(2, 3, 2.0));
        assert_eq!(p.n(), 2);
        assert_eq!(p.alpha[2], 1.0);
        assert_eq!(p.mu.row(2), &[0.0, 0.0, 0.0]);
        assert_eq!(p.sigma.row(2), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn threshold_drops_small_alphas_only() {
        let p = DpParams::with_prior(
            vec![0.05f64.ln(), 0.5f64.ln()],
            Matrix::zeros(2, 2),
            Matrix::filled(2, 2, 1.0),
        );
        let (t, mask) = threshold_alpha(&p, 0.1);
        assert_eq!(mask, vec![false, true]);
        assert_eq!(t.alpha[0], 0.0);
        assert!((t.alpha[1] - 0.5).abs() < 1e-15);
        assert_eq!(t.alpha[2], 1.0);
        assert!(t.retained[2]);
    }

    #[test]
    fn threshold_all_below_keeps_prior_only() {
        let p = DpParams::with_prior(vec![-5.0f64; 4], Matrix::zeros(4, 2), Matrix::filled(4, 2, 1.0));
        let (t, mask) = threshold_alpha(&p, 0.1);
        assert!(mask.iter().all(|&m| !m));
        assert_eq!(t.alpha0(), 1.0);
    }

    #[test]
    fn zero_threshold_drops_nothing() {
        let p = DpParams::with_prior(vec![-40.0f64, 3.0], Matrix::zeros(2, 2), Matrix::filled(2, 2, 1.0));
        let (_, mask) = threshold_alpha(&p, 0.0);
        assert_eq!(mask, vec![true, true]);
    }

    #[test]
    fn softmax_all_masked_is_an_error() {
        let mut l = [1.0f64, 2.0];
        assert_eq!(
            masked_softmax(&mut l, &[false, false]),
            Err(crate::Error::DegenerateMixture)
        );
    }
}
