use alloc::vec::Vec;

use super::{DpParams, DpParamsGrad, NvibProjection};
use crate::matrix::Matrix;
use crate::real::Real;
use crate::{Error, Result};

/// Projects `n` input vectors to DP parameters.
///
/// `alpha_i = exp(w · hidden_i + b + log_alpha_prev_i)`; the mean head is
/// affine and the standard-deviation head is affine followed by `exp`. The
/// prior component `(1, 0, 1)` is appended. `layer` only labels errors.
pub fn project_dp_params<T: Real>(
    hidden: &Matrix<T>,
    log_alpha_prev: &[T],
    proj: &NvibProjection<T>,
    layer: usize,
) -> Result<DpParams<T>> {
    let n = hidden.rows();
    assert_eq!(log_alpha_prev.len(), n, "skip connection length mismatch");
    assert_eq!(hidden.cols(), proj.p(), "hidden width mismatch");

    let log_alpha: Vec<T> = (0..n)
        .map(|i| {
            let dot: T = hidden.row(i).iter().zip(&proj.w_alpha).map(|(&h, &w)| h * w).sum();
            dot + proj.b_alpha + log_alpha_prev[i]
        })
        .collect();

    let mut mu = hidden.matmul(&proj.w_mu);
    let mut log_sigma = hidden.matmul(&proj.w_sigma);
    for i in 0..n {
        for (m, &b) in mu.row_mut(i).iter_mut().zip(&proj.b_mu) {
            *m += b;
        }
        for (s, &b) in log_sigma.row_mut(i).iter_mut().zip(&proj.b_sigma) {
            *s += b;
        }
    }
    let sigma = log_sigma.map(|s| s.exp());

    let params = DpParams::with_prior(log_alpha, mu, sigma);
    let finite = params.alpha.iter().all(|a| a.is_finite())
        && params.mu.is_finite()
        && params.sigma.is_finite()
        && params.sigma.as_slice().iter().all(|&s| s > T::zero());
    if !finite {
        return Err(Error::NonFiniteProjection { layer });
    }
    Ok(params)
}

/// Gradients of [`project_dp_params`] with respect to its inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionGrads<T> {
    pub hidden: Matrix<T>,
    pub log_alpha_prev: Vec<T>,
    pub w_alpha: Vec<T>,
    pub b_alpha: T,
    pub w_mu: Matrix<T>,
    pub b_mu: Vec<T>,
    pub w_sigma: Matrix<T>,
    pub b_sigma: Vec<T>,
}

/// Backward pass of [`project_dp_params`]. Gradients on the prior row are ignored.
pub fn project_dp_params_backward<T: Real>(
    hidden: &Matrix<T>,
    proj: &NvibProjection<T>,
    params: &DpParams<T>,
    grad: &DpParamsGrad<T>,
) -> ProjectionGrads<T> {
    let n = hidden.rows();
    let p = hidden.cols();

    // d/d(log alpha_i) collects both the exp path and the direct skip output.
    let g_log_alpha: Vec<T> = (0..n)
        .map(|i| grad.alpha[i] * params.alpha[i] + grad.log_alpha[i])
        .collect();

    let mut d_hidden = Matrix::zeros(n, p);
    let mut w_alpha = alloc::vec![T::zero(); p];
    for i in 0..n {
        let g = g_log_alpha[i];
        for h in 0..p {
            w_alpha[h] += g * hidden[(i, h)];
            d_hidden[(i, h)] += g * proj.w_alpha[h];
        }
    }
    let b_alpha: T = g_log_alpha.iter().copied().sum();

    let d_mu = Matrix::from_fn(n, p, |i, h| grad.mu[(i, h)]);
    let d_log_sigma = Matrix::from_fn(n, p, |i, h| grad.sigma[(i, h)] * params.sigma[(i, h)]);

    let w_mu = hidden.matmul_tn(&d_mu);
    let w_sigma = hidden.matmul_tn(&d_log_sigma);
    let b_mu = d_mu.col_sums().into_vec();
    let b_sigma = d_log_sigma.col_sums().into_vec();
    d_hidden.add_assign(&d_mu.matmul_nt(&proj.w_mu));
    d_hidden.add_assign(&d_log_sigma.matmul_nt(&proj.w_sigma));

    ProjectionGrads {
        hidden: d_hidden,
        log_alpha_prev: g_log_alpha,
        w_alpha,
        b_alpha,
        w_mu,
        b_mu,
        w_sigma,
        b_sigma,
    }
}
