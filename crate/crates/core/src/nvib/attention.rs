//! Denoising attention in its two forms: over a sampled mixture (training)
//! and over the posterior mean of the base distribution (testing).

use alloc::vec;
use alloc::vec::Vec;

use super::{masked_softmax, DpParams, NvibProjection, SampledMixture};
use crate::matrix::Matrix;
use crate::real::Real;
use crate::{Error, Result};

/// Output of a denoising attention call.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput<T> {
    /// Attended vectors, `m x p`.
    pub output: Matrix<T>,
    /// Attention weights over the `n + 1` components, `m x (n + 1)`.
    pub weights: Matrix<T>,
    /// Projected queries `u = u' W^Q (W^K)^T`, `m x p`.
    pub u: Matrix<T>,
}

/// Gradients of [`denoising_attention_train`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainAttentionGrads<T> {
    pub queries_raw: Matrix<T>,
    pub z: Matrix<T>,
    pub log_pi: Vec<T>,
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
}

/// Gradients of [`denoising_attention_test`].
#[derive(Clone, Debug, PartialEq)]
pub struct TestAttentionGrads<T> {
    pub queries_raw: Matrix<T>,
    pub alpha: Vec<T>,
    pub mu: Matrix<T>,
    pub sigma: Matrix<T>,
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
}

/// Training-time denoising attention over a sampled mixture:
/// `softmax(u Zᵀ/√d + log π − ‖Z‖²/(2√d)) Z`.
pub fn denoising_attention_train<T: Real>(
    queries_raw: &Matrix<T>,
    mix: &SampledMixture<T>,
    proj: &NvibProjection<T>,
) -> Result<AttentionOutput<T>> {
    let k = mix.log_pi.len();
    assert_eq!(mix.z.rows(), k, "mixture size mismatch");
    let sd = T::c(proj.d() as f64).sqrt();
    let two_sd = sd + sd;
    let u = proj.project_queries(queries_raw);
    let mask: Vec<bool> = (0..k)
        .map(|j| mix.active[j] && mix.log_pi[j] != T::neg_infinity())
        .collect();
    let offsets: Vec<T> = (0..k)
        .map(|j| {
            if mask[j] {
                mix.log_pi[j] - mix.z.row(j).iter().map(|&x| x * x).sum::<T>() / two_sd
            } else {
                T::zero()
            }
        })
        .collect();
    let mut weights = u.matmul_nt(&mix.z);
    for i in 0..weights.rows() {
        let row = weights.row_mut(i);
        for j in 0..k {
            row[j] = row[j] / sd + offsets[j];
        }
        masked_softmax(row, &mask)?;
    }
    let output = matmul_masked(&weights, &mix.z, &mask);
    Ok(AttentionOutput { output, weights, u })
}

/// `weights @ values` restricted to the columns flagged in `mask`, so that
/// non-finite rows of masked components never reach the result.
fn matmul_masked<T: Real>(weights: &Matrix<T>, values: &Matrix<T>, mask: &[bool]) -> Matrix<T> {
    if mask.iter().all(|&m| m) {
        return weights.matmul(values);
    }
    let keep: Vec<usize> = (0..mask.len()).filter(|&j| mask[j]).collect();
    let w = Matrix::from_fn(weights.rows(), keep.len(), |i, c| weights[(i, keep[c])]);
    w.matmul(&values.select_rows(&keep))
}

/// Softmax backward: `dL = W ⊙ (dW − rowsum(W ⊙ dW))`.
fn softmax_backward<T: Real>(weights: &Matrix<T>, d_weights: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(weights.rows(), weights.cols());
    for i in 0..weights.rows() {
        let w = weights.row(i);
        let g = d_weights.row(i);
        let dot: T = w.iter().zip(g).map(|(&a, &b)| a * b).sum();
        for (o, (&a, &b)) in out.row_mut(i).iter_mut().zip(w.iter().zip(g)) {
            *o = a * (b - dot);
        }
    }
    out
}

/// Propagates `du` through `u = u' W^Q (W^K)^T`.
fn query_backward<T: Real>(
    queries_raw: &Matrix<T>,
    proj: &NvibProjection<T>,
    d_u: &Matrix<T>,
) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
    let q = queries_raw.matmul(&proj.w_q);
    let d_q = d_u.matmul(&proj.w_k);
    let w_k = d_u.matmul_tn(&q);
    let w_q = queries_raw.matmul_tn(&d_q);
    let queries = d_q.matmul_nt(&proj.w_q);
    (queries, w_q, w_k)
}

/// Backward pass of [`denoising_attention_train`].
pub fn denoising_attention_train_backward<T: Real>(
    queries_raw: &Matrix<T>,
    mix: &SampledMixture<T>,
    proj: &NvibProjection<T>,
    fwd: &AttentionOutput<T>,
    d_out: &Matrix<T>,
) -> TrainAttentionGrads<T> {
    let k = mix.log_pi.len();
    let sd = T::c(proj.d() as f64).sqrt();
    let z = &mix.z;
    let w = &fwd.weights;
    let d_w = d_out.matmul_nt(z);
    let d_l = softmax_backward(w, &d_w);

    let mut d_z = w.matmul_tn(d_out);
    let mut from_u = d_l.matmul_tn(&fwd.u);
    from_u.scale_in_place(T::one() / sd);
    d_z.add_assign(&from_u);
    let col = d_l.col_sums();
    for j in 0..k {
        let s = col.as_slice()[j] / sd;
        for (g, &x) in d_z.row_mut(j).iter_mut().zip(z.row(j)) {
            *g -= s * x;
        }
    }
    let mut d_u = d_l.matmul(z);
    d_u.scale_in_place(T::one() / sd);
    let live = |j: usize| mix.active[j] && mix.log_pi[j] != T::neg_infinity();
    for j in (0..k).filter(|&j| !live(j)) {
        d_z.row_mut(j).iter_mut().for_each(|g| *g = T::zero());
    }
    let log_pi = (0..k)
        .map(|j| if live(j) { col.as_slice()[j] } else { T::zero() })
        .collect();
    let (queries_raw, w_q, w_k) = query_backward(queries_raw, proj, &d_u);
    TrainAttentionGrads {
        queries_raw,
        z: d_z,
        log_pi,
        w_q,
        w_k,
    }
}

/// Per-component quantities of the test-time form.
struct PosteriorTerms<T> {
    mask: Vec<bool>,
    alpha0: T,
    /// `(σ^r)² = √d + σ²`
    r: Matrix<T>,
    /// `μ / (σ^r)²`
    a: Matrix<T>,
    /// `σ² / (σ^r)²`
    s: Matrix<T>,
    /// `√d μ / (σ^r)²`
    c: Matrix<T>,
    /// Query-independent part of each logit.
    offset: Vec<T>,
}

fn posterior_terms<T: Real>(params: &DpParams<T>, d: usize) -> Result<PosteriorTerms<T>> {
    let k = params.alpha.len();
    let p = params.p();
    let sd = T::c(d as f64).sqrt();
    let half = T::c(0.5);
    let mask: Vec<bool> = (0..k)
        .map(|j| params.retained[j] && params.alpha[j] > T::zero())
        .collect();
    let alpha0: T = (0..k).filter(|&j| mask[j]).map(|j| params.alpha[j]).sum();
    if !(alpha0 > T::zero()) {
        return Err(Error::FullyPruned);
    }
    let mut r = Matrix::zeros(k, p);
    let mut a = Matrix::zeros(k, p);
    let mut s = Matrix::zeros(k, p);
    let mut c = Matrix::zeros(k, p);
    let mut offset = vec![T::zero(); k];
    for j in 0..k {
        if !mask[j] {
            continue;
        }
        let mut quad = T::zero();
        let mut log_r = T::zero();
        for h in 0..p {
            let sig2 = params.sigma[(j, h)] * params.sigma[(j, h)];
            let rr = sd + sig2;
            let aa = params.mu[(j, h)] / rr;
            r[(j, h)] = rr;
            a[(j, h)] = aa;
            s[(j, h)] = sig2 / rr;
            c[(j, h)] = sd * aa;
            quad += params.mu[(j, h)] * aa;
            log_r += rr.ln();
        }
        // Σ_h log σ^r = ½ Σ_h log (σ^r)²
        offset[j] = (params.alpha[j] / alpha0).ln() - half * quad - half * log_r;
    }
    Ok(PosteriorTerms {
        mask,
        alpha0,
        r,
        a,
        s,
        c,
        offset,
    })
}

/// Test-time denoising attention over the posterior mean of the DP.
///
/// Logits are `u (μ/(σ^r)²)ᵀ + log(α/α₀) − ½‖μ/σ^r‖² − Σ_h log σ^r` and the
/// value seen by query `i` from component `j` is
/// `(σ_j²/(σ^r_j)²) ⊙ u_i + (√d/(σ^r_j)²) ⊙ μ_j`. Components with `α = 0`
/// are excluded.
pub fn denoising_attention_test<T: Real>(
    queries_raw: &Matrix<T>,
    params: &DpParams<T>,
    proj: &NvibProjection<T>,
) -> Result<AttentionOutput<T>> {
    let terms = posterior_terms(params, proj.d())?;
    let k = params.alpha.len();
    let u = proj.project_queries(queries_raw);
    let mut weights = u.matmul_nt(&terms.a);
    for i in 0..weights.rows() {
        let row = weights.row_mut(i);
        for j in 0..k {
            row[j] += terms.offset[j];
        }
        masked_softmax(row, &terms.mask)?;
    }
    let ws = weights.matmul(&terms.s);
    let mut output = weights.matmul(&terms.c);
    for (o, (&x, &y)) in output
        .as_mut_slice()
        .iter_mut()
        .zip(u.as_slice().iter().zip(ws.as_slice()))
    {
        *o += x * y;
    }
    Ok(AttentionOutput { output, weights, u })
}

/// Backward pass of [`denoising_attention_test`].
pub fn denoising_attention_test_backward<T: Real>(
    queries_raw: &Matrix<T>,
    params: &DpParams<T>,
    proj: &NvibProjection<T>,
    fwd: &AttentionOutput<T>,
    d_out: &Matrix<T>,
) -> Result<TestAttentionGrads<T>> {
    let t = posterior_terms(params, proj.d())?;
    let k = params.alpha.len();
    let p = params.p();
    let sd = T::c(proj.d() as f64).sqrt();
    let half = T::c(0.5);
    let two = T::c(2.0);
    let u = &fwd.u;
    let w = &fwd.weights;

    let gu = d_out.zip_map(u, |g, x| g * x);
    let mut d_w = gu.matmul_nt(&t.s);
    d_w.add_assign(&d_out.matmul_nt(&t.c));
    let d_s = w.matmul_tn(&gu);
    let d_c = w.matmul_tn(d_out);
    let d_l = softmax_backward(w, &d_w);

    let ws = w.matmul(&t.s);
    let mut d_u = d_out.zip_map(&ws, |g, x| g * x);
    d_u.add_assign(&d_l.matmul(&t.a));

    let col = d_l.col_sums();
    let col = col.as_slice();
    let d_a_from_logits = d_l.matmul_tn(u);
    let total: T = (0..k).filter(|&j| t.mask[j]).map(|j| col[j]).sum();

    let mut alpha = vec![T::zero(); k];
    let mut mu = Matrix::zeros(k, p);
    let mut sigma = Matrix::zeros(k, p);
    for j in 0..k {
        if !t.mask[j] {
            continue;
        }
        alpha[j] = col[j] / params.alpha[j] - total / t.alpha0;
        for h in 0..p {
            let m = params.mu[(j, h)];
            let sg = params.sigma[(j, h)];
            let rr = t.r[(j, h)];
            let d_a = d_a_from_logits[(j, h)] - half * col[j] * m + sd * d_c[(j, h)];
            mu[(j, h)] = d_a / rr - half * col[j] * t.a[(j, h)];
            let d_r = -d_a * m / (rr * rr) - d_s[(j, h)] * sg * sg / (rr * rr) - half * col[j] / rr;
            let d_sig2 = d_s[(j, h)] / rr + d_r;
            sigma[(j, h)] = two * sg * d_sig2;
        }
    }
    let (queries_raw, w_q, w_k) = query_backward(queries_raw, proj, &d_u);
    Ok(TestAttentionGrads {
        queries_raw,
        alpha,
        mu,
        sigma,
        w_q,
        w_k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nvib::threshold_alpha;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randm(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
    }

    fn identity_proj(p: usize) -> NvibProjection<f64> {
        let eye = Matrix::from_fn(p, p, |r, c| if r == c { 1.0 } else { 0.0 });
        NvibProjection {
            w_alpha: vec![0.0; p],
            b_alpha: 0.0,
            w_mu: eye.clone(),
            b_mu: vec![0.0; p],
            w_sigma: Matrix::zeros(p, p),
            b_sigma: vec![0.0; p],
            w_q: eye.clone(),
            w_k: eye,
        }
    }

    #[test]
    fn single_component_returns_that_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = randm(1, 4, &mut rng);
        let mix = SampledMixture::new(z.clone(), vec![0.0]);
        let q = randm(3, 4, &mut rng);
        let out = denoising_attention_train(&q, &mix, &identity_proj(4)).unwrap();
        for i in 0..3 {
            assert_eq!(out.output.row(i), z.row(0));
        }
    }

    #[test]
    fn identical_components_return_shared_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let v = randm(1, 3, &mut rng);
        let z = v.vstack(&v);
        let mix = SampledMixture::new(z, vec![0.5f64.ln(), 0.5f64.ln()]);
        let q = randm(2, 3, &mut rng);
        let out = denoising_attention_train(&q, &mix, &identity_proj(3)).unwrap();
        for i in 0..2 {
            for h in 0..3 {
                assert!((out.output[(i, h)] - v[(0, h)]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn train_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let proj = NvibProjection::random(4, 4, 0.7, &mut rng);
        let z = randm(3, 4, &mut rng);
        let log_pi = vec![0.2f64.ln(), 0.3f64.ln(), 0.5f64.ln()];
        let mix = SampledMixture::new(z.clone(), log_pi.clone());
        let q = randm(2, 4, &mut rng);
        let out = denoising_attention_train(&q, &mix, &proj).unwrap();
        let sd = 2.0;
        for i in 0..2 {
            // u_i = q_i W^Q (W^K)^T, element by element
            let mut u = [0.0; 4];
            for h in 0..4 {
                for e in 0..4 {
                    let mut qe = 0.0;
                    for g in 0..4 {
                        qe += q[(i, g)] * proj.w_q[(g, e)];
                    }
                    u[h] += qe * proj.w_k[(h, e)];
                }
            }
            let mut logits = [0.0; 3];
            for j in 0..3 {
                let mut dot = 0.0;
                let mut nrm = 0.0;
                for h in 0..4 {
                    dot += u[h] * z[(j, h)];
                    nrm += z[(j, h)] * z[(j, h)];
                }
                logits[j] = dot / sd + log_pi[j] - nrm / (2.0 * sd);
            }
            let mx = logits.iter().copied().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let tot: f64 = e.iter().sum();
            for h in 0..4 {
                let want: f64 = (0..3).map(|j| e[j] / tot * z[(j, h)]).sum();
                assert!((out.output[(i, h)] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn dropped_component_equals_removed_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let proj = NvibProjection::random(3, 3, 0.5, &mut rng);
        let z = randm(4, 3, &mut rng);
        let q = randm(5, 3, &mut rng);
        let lp = vec![-1.0, -0.5, -2.0, -1.5];
        let mut with_drop = SampledMixture::new(z.clone(), lp.clone());
        with_drop.log_pi[1] = f64::NEG_INFINITY;
        let removed = SampledMixture::new(z.select_rows(&[0, 2, 3]), vec![lp[0], lp[2], lp[3]]);
        let a = denoising_attention_train(&q, &with_drop, &proj).unwrap();
        let b = denoising_attention_train(&q, &removed, &proj).unwrap();
        assert!(a.output.max_abs_diff(&b.output) < 1e-12);
        for i in 0..5 {
            assert_eq!(a.weights[(i, 1)], 0.0);
        }
    }

    #[test]
    fn all_masked_row_is_degenerate() {
        let mix = SampledMixture::new(Matrix::zeros(2, 2), vec![f64::NEG_INFINITY; 2]);
        let err = denoising_attention_train(&Matrix::zeros(1, 2), &mix, &identity_proj(2)).unwrap_err();
        assert_eq!(err, Error::DegenerateMixture);
    }

    #[test]
    fn test_form_single_prior_component_value() {
        // No data components: only the prior (α = 1, μ = 0, σ = 1) survives.
        let params = DpParams::with_prior(vec![], Matrix::zeros(0, 4), Matrix::zeros(0, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let q = randm(3, 4, &mut rng);
        let proj = identity_proj(4);
        let out = denoising_attention_test(&q, &params, &proj).unwrap();
        // d = 4 so (σ^r)² = 2 + 1 = 3; value = u / 3.
        for i in 0..3 {
            assert_eq!(out.weights[(i, 0)], 1.0);
            for h in 0..4 {
                assert!((out.output[(i, h)] - q[(i, h)] / 3.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn test_form_small_sigma_limit_matches_train_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let proj = NvibProjection::random(4, 4, 0.5, &mut rng);
        let n = 3;
        let mu = randm(n, 4, &mut rng);
        let log_alpha = vec![0.3, -0.8, 1.1];
        let params = DpParams::with_prior(log_alpha, mu, Matrix::filled(n, 4, 1e-6));
        let mut params = params;
        params.sigma.row_mut(n).iter_mut().for_each(|s| *s = 1e-6);
        let q = randm(2, 4, &mut rng);
        let test = denoising_attention_test(&q, &params, &proj).unwrap();
        let a0 = params.alpha0();
        let log_pi = params.alpha.iter().map(|a| (a / a0).ln()).collect();
        let mix = SampledMixture::new(params.mu.clone(), log_pi);
        let train = denoising_attention_train(&q, &mix, &proj).unwrap();
        assert!(test.output.max_abs_diff(&train.output) < 1e-5);
    }

    #[test]
    fn test_form_excludes_thresholded_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let proj = NvibProjection::random(3, 3, 0.5, &mut rng);
        let params = DpParams::with_prior(
            vec![0.01f64.ln(), 0.4],
            randm(2, 3, &mut rng),
            Matrix::filled(2, 3, 0.5),
        );
        let (params, mask) = threshold_alpha(&params, 0.1);
        assert_eq!(mask, vec![false, true]);
        let q = randm(4, 3, &mut rng);
        let out = denoising_attention_test(&q, &params, &proj).unwrap();
        for i in 0..4 {
            assert_eq!(out.weights[(i, 0)], 0.0);
            let s: f64 = out.weights.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn test_form_zero_total_is_an_error() {
        let mut params = DpParams::with_prior(vec![0.0f64], Matrix::zeros(1, 2), Matrix::filled(1, 2, 1.0));
        params.retained = vec![false, false];
        let err = denoising_attention_test(&Matrix::zeros(1, 2), &params, &identity_proj(2)).unwrap_err();
        assert_eq!(err, Error::FullyPruned);
    }
}
